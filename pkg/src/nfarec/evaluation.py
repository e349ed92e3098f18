"""Held-out evaluation, ablation tables and representation export."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Config
from .data import Bundle
from .graph_encoder import structural_reps
from .metrics import ndcg_at_k, rank_items, recall_at_k
from .model import Checkpoint, NFARec, TrainingView, check_provenance, fit
from .seq_encoder import make_batch, polarity_from_intensities, intensity, time_reference

log = logging.getLogger(__name__)

KS = (5, 10, 20)


@dataclass
class MetricReport:
    recall: dict
    ndcg: dict
    polarity_accuracy: float
    n_users: int
    n_skipped: int
    split: str = "test"
    include_seen: bool = False
    positive_only: bool = False
    per_user: dict = field(default_factory=dict, repr=False)  # user -> {metric: value}

    def rows(self) -> list:
        out = []
        for k in sorted(self.recall):
            out.append((f"recall@{k}", self.recall[k]))
            out.append((f"ndcg@{k}", self.ndcg[k]))
        out.append(("polarity_accuracy", self.polarity_accuracy))
        out.append(("users", self.n_users))
        out.append(("skipped_users", self.n_skipped))
        return out

    def to_kv(self) -> str:
        lines = []
        for key, value in self.rows():
            lines.append(f"{key}\t{value:.4f}" if isinstance(value, float) else f"{key}\t{value}")
        lines.append(f"split\t{self.split}")
        lines.append(f"excluded_items\t{'none' if self.include_seen else 'train-seen'}")
        lines.append(f"relevance\t{'positive' if self.positive_only else 'any'}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        ks = sorted(self.recall)
        head = "".join(f"{'R@' + str(k):>9}{'N@' + str(k):>9}" for k in ks)
        body = "".join(f"{self.recall[k]:>9.4f}{self.ndcg[k]:>9.4f}" for k in ks)
        return (f"split={self.split} users={self.n_users} skipped={self.n_skipped} "
                f"polarity_acc={self.polarity_accuracy:.4f}\n{head}\n{body}\n")


def relevant_sets(bundle: Bundle, split: str, positive_only: bool = False) -> list:
    seqs = bundle.split.split_of(split).sequences
    if positive_only:
        return [set(e[0] for e in s if e[2] > 0) for s in seqs]
    return [set(e[0] for e in s) for s in seqs]


def polarity_predictions(model: NFARec, bundle: Bundle, split: str = "test") -> tuple:
    """Predicted and true next polarities for every event of ``split``.

    Each user's sequence up to the end of ``split`` is encoded causally with
    the training window's time scale; event ``j`` is predicted from the
    hidden state of event ``j - 1``.
    """
    order = ["train", "validation", "test"]
    upto = order[:order.index(split) + 1]
    parts = [bundle.split.split_of(s).sequences for s in upto]
    max_len = model.config.max_seq_len or None
    users, seqs, refs, starts = [], [], [], []
    for u in range(bundle.split.train.n_users):
        full = [e for p in parts for e in p[u]]
        n_target = len(parts[-1][u])
        if n_target == 0 or len(full) < 2:
            continue
        window = full[-max_len:] if max_len else full
        first_target = len(window) - n_target
        users.append(u)
        seqs.append(window)
        refs.append(time_reference(bundle.split.train.sequences[u], max_len))
        starts.append(max(first_target, 1))
    if not users:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    batch = make_batch(seqs, time_refs=refs)
    params = model.frozen()
    enc = model.encode_sequences(batch, params)
    B, n, d = enc.H.shape
    flat = enc.H.values.reshape(B * n, d)
    prev, nxt = [], []
    for b, (seq, s) in enumerate(zip(seqs, starts)):
        for j in range(s, len(seq)):
            prev.append(b * n + j - 1)
            nxt.append(b * n + j)
    prev, nxt = np.asarray(prev), np.asarray(nxt)
    times = batch.times.reshape(-1)
    lam_pos, lam_neg, _ = intensity(nx.constant(flat[prev]), times[nxt], times[prev], params)
    pred = polarity_from_intensities(lam_pos.values, lam_neg.values)
    return pred, batch.polarities.reshape(-1)[nxt]


def evaluate(checkpoint: Checkpoint, bundle: Bundle, split: str = "test",
             include_seen: bool | None = None, positive_only: bool | None = None,
             ks=KS, users=None) -> MetricReport:
    """Full-ranking Recall@K / NDCG@K on ``split`` plus next-polarity accuracy.

    Users with no relevant item in the split are skipped and counted.
    Per-user values are averaged in ascending user order whatever order
    ``users`` is given in.
    """
    check_provenance(checkpoint, bundle)
    cfg = checkpoint.config
    include_seen = cfg.include_seen if include_seen is None else include_seen
    positive_only = cfg.positive_only if positive_only is None else positive_only
    model = checkpoint.model(bundle.split.train.n_users)
    view = TrainingView.from_bundle(bundle, cfg)
    scores = model.scores(view)
    relevant = relevant_sets(bundle, split, positive_only)
    seen = [set(e[0] for e in s) for s in bundle.split.train.sequences]
    kmax = max(ks)
    chosen = range(len(relevant)) if users is None else users
    per_user = {}
    skipped = 0
    for u in chosen:
        if not relevant[u]:
            skipped += 1
            continue
        ranked = list(rank_items(scores[u], exclude=None if include_seen else seen[u], k=kmax))
        per_user[u] = {("recall", k): recall_at_k(ranked, relevant[u], k) for k in ks}
        per_user[u].update({("ndcg", k): ndcg_at_k(ranked, relevant[u], k) for k in ks})
    ordered = [per_user[u] for u in sorted(per_user)]
    recall = {k: float(np.mean([m[("recall", k)] for m in ordered])) if ordered else 0.0 for k in ks}
    ndcg = {k: float(np.mean([m[("ndcg", k)] for m in ordered])) if ordered else 0.0 for k in ks}
    pred, truth = polarity_predictions(model, bundle, split)
    acc = float(np.mean(pred == truth)) if truth.size else float("nan")
    return MetricReport(recall, ndcg, acc, len(per_user), skipped, split, include_seen,
                        positive_only, per_user)


# -- ablations -------------------------------------------------------------------

ABLATIONS = (
    ("Full", {}),
    ("w/o Seq", {"no_seq": True}),
    ("w/o Gra1", {"no_gra1": True}),
    ("w/o Gra2", {"no_gra2": True}),
)
ORDERS = (1, 2, 3, 4)


@dataclass
class AblationRow:
    name: str
    group: str          # "ablation" or "order"
    changes: dict
    runs: list          # one MetricReport per seed

    def median(self, metric: str, k: int) -> float:
        return float(np.median([getattr(r, metric)[k] for r in self.runs]))


@dataclass
class AblationTable:
    rows: list
    seeds: tuple

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def to_text(self) -> str:
        out = [f"# medians over seeds {list(self.seeds)}",
               f"{'Model':<10}{'N@10':>9}{'R@20':>9}{'N@20':>9}"]
        current = None
        for r in self.rows:
            if r.group != current:
                out.append("-" * 37)
                current = r.group
            out.append(f"{r.name:<10}{r.median('ndcg', 10):>9.4f}{r.median('recall', 20):>9.4f}"
                       f"{r.median('ndcg', 20):>9.4f}")
        return "\n".join(out) + "\n"

    def to_kv(self) -> str:
        lines = []
        for r in self.rows:
            key = r.name.lower().replace("/", "").replace(" ", "_")
            lines.append(f"{key}.ndcg@10\t{r.median('ndcg', 10):.4f}")
            lines.append(f"{key}.recall@20\t{r.median('recall', 20):.4f}")
            lines.append(f"{key}.ndcg@20\t{r.median('ndcg', 20):.4f}")
        return "\n".join(lines) + "\n"


def ablation_suite(bundle: Bundle, base: Config, seeds=None, orders=ORDERS,
                   split: str = "test", progress=None) -> AblationTable:
    """Train and evaluate each ablation and each correlation order, per seed.

    Ablation rows share ``base`` except for one flag; order rows are the
    full model with only ``order`` changed.
    """
    seeds = tuple(seeds) if seeds is not None else (base.seed,)
    plan = [(name, "ablation", changes) for name, changes in ABLATIONS]
    plan += [(f"{L}-Order", "order", {"order": L}) for L in orders]
    rows = []
    for name, group, changes in plan:
        runs = []
        for seed in seeds:
            cfg = base.replace(seed=seed, **changes)
            result = fit(bundle, cfg)
            runs.append(evaluate(result.best, bundle, split))
            if progress:
                progress(name, seed, runs[-1])
        rows.append(AblationRow(name, group, changes, runs))
    return AblationTable(rows, seeds)


# -- export ----------------------------------------------------------------------

def _write_rows(path: Path, ids, M: np.ndarray) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for ident, row in zip(ids, M):
            fh.write(ident + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")


def representations(checkpoint: Checkpoint, bundle: Bundle) -> dict:
    model = checkpoint.model(bundle.split.train.n_users)
    view = TrainingView.from_bundle(bundle, checkpoint.config)
    params = model.frozen()
    enc = model.encode_sequences(view.batch, params)
    reps = structural_reps(view.A_hat, view.X_masked, view.hyperedges, params["item_embedding"],
                           params, checkpoint.config.hgc_layers, view.relay,
                           checkpoint.config.literal_hgc)
    return {"user_sequential": enc.e_S.values, "user_structural": reps.e_H1.values,
            "item": reps.lam.values}


def export_representations(checkpoint: Checkpoint, bundle: Bundle, out_dir) -> list:
    """Write user sequential, user structural and item vectors as TSV files."""
    check_provenance(checkpoint, bundle)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create export directory {out}: {exc}") from exc
    reps = representations(checkpoint, bundle)
    users, items = bundle.split.train.user_ids, bundle.split.train.item_ids
    paths = [out / "user_sequential.tsv", out / "user_structural.tsv", out / "item_representations.tsv"]
    _write_rows(paths[0], users, reps["user_sequential"])
    _write_rows(paths[1], users, reps["user_structural"])
    _write_rows(paths[2], items, reps["item"])
    return paths


def read_representations(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        ident, *vals = line.split("\t")
        out[ident] = np.array([float(v) for v in vals])
    return out
