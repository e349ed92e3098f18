"""Decoder, multi-task objective, training loop and checkpoints."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import Config
from .data import Bundle, CorrelationSet
from .graph_encoder import feedback_relay, init_hgc_params, structural_reps
from .metrics import ndcg_at_k, rank_items, recall_at_k
from .numerics import DiffTensor, NumericError
from .seq_encoder import (SequenceBatch, elapsed_ratio, encode, init_encoder_params,
                          intensity_base, intensity_from_base, make_batch, transition_index)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NFARECM1"
CHECKPOINT_VERSION = 1


class ProvenanceError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# -- decoder and losses --------------------------------------------------------

def score_users(e_S: DiffTensor | None, e_H1: DiffTensor | None, e_H2: DiffTensor | None,
                V: DiffTensor, params: dict, delta: float = 1.2) -> DiffTensor:
    """``tanh(e_S V^T + e_H1 V^T + delta * (e_H2 W + b))``; a ``None`` term is left out."""
    Vt = nx.transpose(V)
    terms = []
    if e_S is not None:
        terms.append(nx.matmul(e_S, Vt))
    if e_H1 is not None:
        terms.append(nx.matmul(e_H1, Vt))
    if e_H2 is not None and delta != 0:
        dec = nx.add(nx.matmul(e_H2, params["decoder.w"]),
                     nx.repeat_rows(params["decoder.b"], e_H2.shape[0]))
        terms.append(nx.scale(dec, delta))
    if not terms:
        n_users = next(t.shape[0] for t in (e_S, e_H1, e_H2) if t is not None)
        return nx.constant(np.zeros((n_users, V.shape[0])))
    pre = terms[0]
    for t in terms[1:]:
        pre = nx.add(pre, t)
    for t in (e_S, e_H1, e_H2):
        if t is not None and t.shape[0] != pre.shape[0]:
            raise nx.DimensionError(f"score_users: user count mismatch {t.shape[0]} vs {pre.shape[0]}")
    return nx.tanh(pre)


def loss_weights(history: list, targets: list, n_items: int, beta1: float, beta2: float) -> np.ndarray:
    """``c[u, i]``: beta1 on history items, beta2 on targets (targets win), else 0."""
    C = np.zeros((len(history), n_items))
    for u, items in enumerate(history):
        C[u, list(items)] = beta1
    for u, items in enumerate(targets):
        C[u, list(items)] = beta2
    return C


def loss_main(r: DiffTensor, history: list, targets: list, beta1: float, beta2: float,
              no_unlabelled: bool = False) -> DiffTensor:
    """Weighted multi-label cross-entropy summed over users and items.

    Positives (history or target items) cost ``-c log sigmoid(r)``.  Unless
    ``no_unlabelled``, every other item adds ``-log(1 - sigmoid(r))``.
    """
    if not any(len(t) for t in targets):
        raise ValueError("loss_main: every user has an empty target set")
    n_items = r.shape[1]
    C = loss_weights(history, targets, n_items, beta1, beta2)
    labelled = np.zeros_like(C, dtype=bool)
    for u, (h, t) in enumerate(zip(history, targets)):
        labelled[u, list(h)] = True
        labelled[u, list(t)] = True
    pos = nx.sum(nx.mul(nx.log_sigmoid(r), nx.constant(C)))
    loss = nx.scale(pos, -1.0)
    if not no_unlabelled:
        neg = nx.sum(nx.mul(nx.log_sigmoid(nx.scale(r, -1.0)), nx.constant((~labelled).astype(float))))
        loss = nx.sub(loss, neg)
    return loss


def mci_integral(intensity_fn: Callable[[np.ndarray], DiffTensor], t_start, t_end,
                 n_samples: int, rng: np.random.Generator) -> DiffTensor:
    """Monte Carlo estimate of the summed integrals of ``intensity_fn`` over gaps.

    ``t_start``/``t_end`` are scalars or equal-length arrays of gap bounds.
    ``intensity_fn`` maps a (G, N) array of sample times to a (G, N) tensor.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    t0 = np.atleast_1d(np.asarray(t_start, dtype=np.float64))
    t1 = np.atleast_1d(np.asarray(t_end, dtype=np.float64))
    gaps = t1 - t0
    if np.any(gaps < 0):
        raise ValueError("t_end must not precede t_start")
    x = t0[:, None] + rng.random((t0.size, n_samples)) * gaps[:, None]
    lam = intensity_fn(x)
    weights = np.repeat((gaps / n_samples)[:, None], n_samples, axis=1)
    return nx.sum(nx.mul(lam, nx.constant(weights)))


def _polarity_columns(polarities: np.ndarray) -> np.ndarray:
    out = np.zeros((len(polarities), 2))
    out[polarities > 0, 0] = 1.0
    out[polarities < 0, 1] = 1.0
    return out


def log_likelihood(batch: SequenceBatch, H: DiffTensor, params: dict, n_samples: int,
                   rng: np.random.Generator) -> DiffTensor:
    """Point-process log-likelihood summed over sequences.

    Every event with a predecessor contributes ``log lambda_z(t_j)`` for its
    observed polarity ``z``, using the hidden state of the previous event;
    the total intensity is integrated by Monte Carlo over each gap.  A
    length-1 sequence contributes nothing.
    """
    B, n, d = H.shape
    prev, nxt = transition_index(batch)
    if prev.size == 0:
        return nx.constant(0.0)
    times = batch.times.reshape(-1)
    t_prev, t_next = times[prev], times[nxt]
    h_prev = nx.take_rows(nx.reshape(H, (B * n, d)), prev)
    base = intensity_base(h_prev, params)
    lam_events = intensity_from_base(base, elapsed_ratio(t_next, t_prev), params)
    observed = _polarity_columns(batch.polarities.reshape(-1)[nxt])
    event_ll = nx.sum(nx.mul(nx.log(lam_events), nx.constant(observed)))

    spread = np.kron(np.eye(2), np.ones((1, n_samples)))  # (2, 2N): polarity -> sample block
    fold = np.vstack([np.eye(n_samples), np.eye(n_samples)])  # (2N, N): sum the two blocks
    base_big = nx.matmul(base, nx.constant(spread))
    wide = _spread_params(params, spread)

    def total_intensity(x: np.ndarray) -> DiffTensor:
        ratio = (x - t_prev[:, None]) / t_prev[:, None]
        lam = intensity_from_base(base_big, np.concatenate([ratio, ratio], axis=1), wide)
        return nx.matmul(lam, nx.constant(fold))

    integral = mci_integral(total_intensity, t_prev, t_next, n_samples, rng)
    return nx.sub(event_ll, integral)


def _spread_params(params: dict, spread: np.ndarray) -> dict:
    """Intensity parameters widened from 2 columns to ``spread``'s width."""
    S = nx.constant(spread)
    return {
        "intensity.alpha": nx.matmul(params["intensity.alpha"], S),
        "intensity.log_beta": nx.matmul(params["intensity.log_beta"], S),
    }


def loss_final(main: DiffTensor, auxi: DiffTensor, delta2: float) -> DiffTensor:
    """``main + delta2 * auxi`` where ``auxi`` is the negative log-likelihood."""
    for name, t in (("main", main), ("auxiliary", auxi)):
        if not np.all(np.isfinite(t.values)):
            raise NumericError(f"loss_final: non-finite {name} loss {t.values!r}")
    if delta2 == 0:
        return main
    return nx.add(main, nx.scale(auxi, delta2))


# -- model ---------------------------------------------------------------------

def split_history_targets(sequences: list, target_fraction: float = 0.2) -> tuple:
    """Last ``ceil(fraction * n)`` items of each sequence are targets."""
    history, targets = [], []
    for seq in sequences:
        items = [e[0] for e in seq]
        n_t = min(len(items), max(1, math.ceil(target_fraction * len(items) - 1e-9))) if items else 0
        history.append(set(items[:len(items) - n_t]))
        targets.append(set(items[len(items) - n_t:]))
    return history, targets


@dataclass
class TrainingView:
    """Static inputs derived once from the training split."""

    batch: SequenceBatch
    hyperedges: np.ndarray
    A_hat: np.ndarray
    X_masked: np.ndarray
    relay: np.ndarray
    history: list
    targets: list

    @classmethod
    def from_bundle(cls, bundle: Bundle, config: Config) -> "TrainingView":
        corr = bundle.correlation_for(config.order, config.self_loops)
        return cls.build(bundle.split.train.sequences, bundle.split.train.hyperedges(), corr, config)

    @classmethod
    def build(cls, sequences: list, hyperedges: np.ndarray, corr: CorrelationSet,
              config: Config) -> "TrainingView":
        batch = make_batch(sequences, max_len=config.max_seq_len or None)
        history, targets = split_history_targets(sequences, config.target_fraction)
        return cls(batch, hyperedges, corr.A_hat, corr.X_masked,
                   feedback_relay(hyperedges, corr.X_masked), history, targets)

    def subset(self, users: np.ndarray) -> "TrainingView":
        b = self.batch
        keep = b.valid[users].any(axis=0)
        n = int(np.nonzero(keep)[0].max()) + 1
        sub = SequenceBatch(b.items[users, :n], b.times[users, :n], b.polarities[users, :n],
                            b.valid[users, :n])
        return TrainingView(sub, self.hyperedges[users], self.A_hat, self.X_masked,
                            self.relay[users], [self.history[u] for u in users],
                            [self.targets[u] for u in users])


@dataclass
class ForwardPass:
    r: DiffTensor
    H: DiffTensor | None
    e_S: DiffTensor | None
    e_H1: DiffTensor | None
    e_H2: DiffTensor | None
    lam: DiffTensor | None


class NFARec:
    """Parameter store plus the forward pass over a :class:`TrainingView`."""

    def __init__(self, config: Config, n_users: int, n_items: int, params: dict | None = None):
        self.config = config
        self.n_users = n_users
        self.n_items = n_items
        if params is None:
            params = self.init_params(config, n_items)
        self.params = params

    @staticmethod
    def init_params(config: Config, n_items: int) -> dict:
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        params = init_encoder_params(rng, n_items, d, config.seq_layers, config.attention_only,
                                     config.intensity_hidden)
        params.update(init_hgc_params(rng, d))
        params["decoder.w"] = nx.tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, n_items)), True)
        params["decoder.b"] = nx.tensor(np.zeros((1, n_items)), True)
        return params

    def frozen(self) -> dict:
        return {k: nx.constant(v.values) for k, v in self.params.items()}

    def encode_sequences(self, batch: SequenceBatch, params: dict | None = None):
        c = self.config
        return encode(batch, params or self.params, n_layers=c.seq_layers, causal=not c.no_masking,
                      attention_only=c.attention_only, pooling=c.pooling, window=c.pool_window,
                      time_encoding=c.time_encoding)

    def forward(self, view: TrainingView, params: dict | None = None,
                need_hidden: bool = False) -> ForwardPass:
        c = self.config
        p = params or self.params
        V = p["item_embedding"]
        H = e_S = None
        if not c.no_seq or need_hidden:
            enc = self.encode_sequences(view.batch, p)
            H = enc.H
            e_S = None if c.no_seq else enc.e_S
        e_H1 = e_H2 = lam = None
        if not (c.no_gra1 and c.no_gra2):
            reps = structural_reps(view.A_hat, view.X_masked, view.hyperedges, V, p,
                                   n_layers=c.hgc_layers, relay=view.relay, literal=c.literal_hgc)
            lam = reps.lam
            e_H1 = None if c.no_gra1 else reps.e_H1
            e_H2 = None if c.no_gra2 else reps.e_H2
        if e_S is None and e_H1 is None and e_H2 is None:
            r = nx.constant(np.zeros((view.batch.size, self.n_items)))
        else:
            r = score_users(e_S, e_H1, e_H2, V, p, c.delta)
        return ForwardPass(r, H, e_S, e_H1, e_H2, lam)

    def losses(self, view: TrainingView, rng: np.random.Generator) -> tuple:
        """``(L_final, L_main, L_auxi)`` for one step; L_auxi is a negative log-likelihood."""
        c = self.config
        use_aux = not c.no_seq and c.delta2 > 0
        fp = self.forward(view)
        main = loss_main(fp.r, view.history, view.targets, c.beta1, c.beta2, c.no_unlabelled_loss)
        if use_aux:
            auxi = nx.scale(log_likelihood(view.batch, fp.H, self.params, c.n_mci, rng), -1.0)
        else:
            auxi = nx.constant(0.0)
        return loss_final(main, auxi, c.delta2 if use_aux else 0.0), main, auxi

    def scores(self, view: TrainingView) -> np.ndarray:
        return self.forward(view, self.frozen()).r.values


# -- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.values) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict          # name -> ndarray
    config: Config
    fingerprint: str
    epoch: int

    def model(self, n_users: int | None = None) -> NFARec:
        n_items = self.params["item_embedding"].shape[0]
        params = {k: nx.tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return NFARec(self.config, n_users or 0, n_items, params)


def snapshot(model: NFARec, fingerprint: str, epoch: int) -> Checkpoint:
    return Checkpoint({k: v.values.copy() for k, v in model.params.items()}, model.config,
                      fingerprint, epoch)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    header = f"fingerprint = {ckpt.fingerprint}\nepoch = {ckpt.epoch}\n" + ckpt.config.serialize()
    block = header.encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        lines = fh.read(n).decode("utf-8").splitlines(keepends=True)
        fingerprint = lines[0].split(" = ", 1)[1].strip()
        epoch = int(lines[1].split(" = ", 1)[1])
        config = Config.parse("".join(lines[2:]))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(params, config, fingerprint, epoch)


def check_provenance(ckpt: Checkpoint, bundle: Bundle) -> None:
    if ckpt.fingerprint != bundle.fingerprint:
        raise ProvenanceError(
            f"checkpoint was trained on dataset {ckpt.fingerprint}, bundle is {bundle.fingerprint}")


# -- training --------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss_main: float
    loss_auxi: float
    val_recall: float
    val_ndcg: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.loss_main:.10g}\t{self.loss_auxi:.10g}\t"
                f"{self.val_recall:.6f}\t{self.val_ndcg:.6f}")


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)
    diverged: bool = False

    def log_text(self) -> str:
        return "".join(h.line() + "\n" for h in self.history)


def quick_validation(scores: np.ndarray, seen: list, relevant: list, k: int = 20) -> tuple:
    """Mean Recall@k / NDCG@k over users with a nonempty relevant set."""
    rec, nd = [], []
    for u, rel in enumerate(relevant):
        if not rel:
            continue
        ranked = rank_items(scores[u], exclude=seen[u], k=k)
        rec.append(recall_at_k(list(ranked), rel, k))
        nd.append(ndcg_at_k(list(ranked), rel, k))
    if not rec:
        return float("nan"), float("nan")
    return float(np.mean(rec)), float(np.mean(nd))


def fit(bundle: Bundle, config: Config, log_path=None, callback=None) -> FitResult:
    """Train with Adam; keep the checkpoint with the best validation NDCG@20.

    A non-finite loss stops training and returns the last finite state with
    ``diverged=True``.
    """
    split = bundle.split
    view = TrainingView.from_bundle(bundle, config)
    model = NFARec(config, split.train.n_users, split.train.n_items)
    opt = Adam(model.params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    seen = [set(e[0] for e in seq) for seq in split.train.sequences]
    val_rel = [set(e[0] for e in seq) for seq in split.validation.sequences]
    if config.positive_only:
        val_rel = [set(e[0] for e in seq if e[2] > 0) for seq in split.validation.sequences]
    n_users = split.train.n_users
    order_rng = np.random.default_rng([config.seed, 1])

    last = snapshot(model, bundle.fingerprint, 0)
    best, best_ndcg = last, -math.inf
    history = []
    diverged = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            rng = np.random.default_rng([config.seed, epoch])
            if config.batch_users and config.batch_users < n_users:
                perm = order_rng.permutation(n_users)
                chunks = [np.sort(perm[i:i + config.batch_users])
                          for i in range(0, n_users, config.batch_users)]
            else:
                chunks = [None]
            main_sum = auxi_sum = 0.0
            for users in chunks:
                v = view if users is None else view.subset(users)
                opt.zero_grad()
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        total, main, auxi = model.losses(v, rng)
                    finite = np.isfinite(total.values).all()
                except (NumericError, nx.ParameterDomainError):
                    finite = False
                if not finite:
                    diverged = True
                    break
                with np.errstate(over="ignore", invalid="ignore"):
                    total.backward()
                if not all(np.isfinite(p.grad).all() for p in model.params.values()):
                    diverged = True
                    break
                opt.step()
                main_sum += main.item()
                auxi_sum += auxi.item()
            if diverged:
                log.warning("loss diverged at epoch %d; keeping epoch %d", epoch, last.epoch)
                break
            with np.errstate(over="ignore", invalid="ignore"):
                scores = model.scores(view)
            rec, nd = quick_validation(scores, seen, val_rel, 20)
            entry = EpochLog(epoch, main_sum, auxi_sum, rec, nd)
            history.append(entry)
            if log_fh:
                log_fh.write(entry.line() + "\n")
                log_fh.flush()
            last = snapshot(model, bundle.fingerprint, epoch)
            score_key = nd if not math.isnan(nd) else -main_sum
            if score_key > best_ndcg:
                best, best_ndcg = last, score_key
            if callback is not None:
                callback(entry, model)
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(best, last, history, diverged)
