"""Transformer-Hawkes sequence encoder and per-polarity intensities.

Sequences are right-padded into a batch.  Attention runs with a causal mask
(plus a key-validity mask for padding), so position ``j`` never sees events
after ``j``.  Polarity index 0 is positive feedback, index 1 negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import normalize_times
from .numerics import DiffTensor

POS, NEG = 0, 1


class EmptySequenceError(ValueError):
    pass


class TimeNormalizationError(ValueError):
    pass


@dataclass
class SequenceBatch:
    items: np.ndarray        # (B, n) int
    times: np.ndarray        # (B, n) float, rescaled
    polarities: np.ndarray   # (B, n) int in {+1, -1}, 0 on padding
    valid: np.ndarray        # (B, n) bool

    @property
    def size(self) -> int:
        return self.items.shape[0]

    @property
    def length(self) -> int:
        return self.items.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def attention_mask(self, causal: bool = True) -> np.ndarray:
        """``mask[b, j, k]`` is true when query ``j`` may attend to key ``k``."""
        n = self.length
        keys = np.broadcast_to(self.valid[:, None, :], (self.size, n, n))
        if not causal:
            return keys.copy()
        return keys & np.tril(np.ones((n, n), dtype=bool))[None]


def make_batch(sequences, max_len: int | None = None, time_refs=None) -> SequenceBatch:
    """Pad ``(item, timestamp, polarity, ...)`` sequences into a batch.

    Only the last ``max_len`` events of each sequence are kept.  Times are
    rescaled per sequence to ``[1, 2]`` unless ``time_refs`` supplies a
    ``(t_min, span)`` pair per sequence, in which case later events may map
    beyond 2.
    """
    seqs = [list(s)[-max_len:] if max_len else list(s) for s in sequences]
    if any(len(s) == 0 for s in seqs):
        raise EmptySequenceError("cannot encode an empty sequence")
    B, n = len(seqs), max(len(s) for s in seqs)
    items = np.zeros((B, n), dtype=np.int64)
    times = np.ones((B, n))
    pols = np.zeros((B, n), dtype=np.int64)
    valid = np.zeros((B, n), dtype=bool)
    for b, s in enumerate(seqs):
        m = len(s)
        raw = np.array([e[1] for e in s], dtype=np.float64)
        if time_refs is None:
            t_min, span = raw[0], raw[-1] - raw[0]
        else:
            t_min, span = time_refs[b]
        items[b, :m] = [e[0] for e in s]
        times[b, :m] = normalize_times(raw, t_min, span)
        times[b, m:] = times[b, m - 1]
        pols[b, :m] = [e[2] for e in s]
        valid[b, :m] = True
    return SequenceBatch(items, times, pols, valid)


def time_reference(sequence, max_len: int | None = None) -> tuple:
    """``(t_min, span)`` that :func:`make_batch` would use for this sequence."""
    s = list(sequence)[-max_len:] if max_len else list(sequence)
    return float(s[0][1]), float(s[-1][1] - s[0][1])


def init_encoder_params(rng: np.random.Generator, n_items: int, d_model: int, n_layers: int = 1,
                        attention_only: bool = False, intensity_hidden: int = 0,
                        embedding: DiffTensor | None = None) -> dict:
    params = {}
    params["item_embedding"] = embedding if embedding is not None else nx.tensor(
        rng.normal(0.0, 1.0 / np.sqrt(d_model), (n_items, d_model)), requires_grad=True)
    std = 1.0 / np.sqrt(d_model)
    for layer in range(n_layers):
        for name in ("wq", "wk", "wv"):
            params[f"attn{layer}.{name}"] = nx.tensor(rng.normal(0.0, std, (d_model, d_model)), True)
        if not attention_only:
            params[f"ffn{layer}.w1"] = nx.tensor(rng.normal(0.0, std, (d_model, d_model)), True)
            params[f"ffn{layer}.b1"] = nx.tensor(np.zeros((1, d_model)), True)
            params[f"ffn{layer}.w2"] = nx.tensor(rng.normal(0.0, std, (d_model, d_model)), True)
            params[f"ffn{layer}.b2"] = nx.tensor(np.zeros((1, d_model)), True)
    width = d_model
    for k in range(intensity_hidden):
        params[f"intensity.hidden{k}.w"] = nx.tensor(rng.normal(0.0, std, (width, d_model)), True)
        params[f"intensity.hidden{k}.b"] = nx.tensor(np.zeros((1, d_model)), True)
    params["intensity.w"] = nx.tensor(rng.normal(0.0, std, (width, 2)), True)
    params["intensity.b"] = nx.tensor(np.zeros((1, 2)), True)
    params["intensity.alpha"] = nx.tensor(np.full((1, 2), -0.1), True)
    params["intensity.log_beta"] = nx.tensor(np.zeros((1, 2)), True)
    return params


def embed(V: DiffTensor, items) -> DiffTensor:
    """Rows of ``V`` for ``items`` (any integer array shape), shape ``items.shape + (d,)``."""
    items = np.asarray(items, dtype=np.int64)
    rows = nx.take_rows(V, items.reshape(-1))
    return nx.reshape(rows, items.shape + (V.shape[1],))


def _linear(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """``x @ w (+ b)`` for 2-D or batched 3-D ``x``."""
    if x.ndim == 3:
        B, n, _ = x.shape
        flat = nx.reshape(x, (B * n, x.shape[2]))
        return nx.reshape(_linear(flat, w, b), (B, n, w.shape[1]))
    out = nx.matmul(x, w)
    if b is not None:
        out = nx.add(out, nx.repeat_rows(b, x.shape[0]))
    return out


def attention_layer(E: DiffTensor, mask: np.ndarray, params: dict, layer: int = 0,
                    attention_only: bool = False) -> DiffTensor:
    """One single-head self-attention block on ``E`` of shape (B, n, d).

    Without ``attention_only`` the attention output gets a residual and
    layer norm, followed by a position-wise ReLU feed-forward sublayer with
    its own residual and layer norm.
    """
    d_k = params[f"attn{layer}.wq"].shape[1]
    q = _linear(E, params[f"attn{layer}.wq"])
    k = _linear(E, params[f"attn{layer}.wk"])
    v = _linear(E, params[f"attn{layer}.wv"])
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(d_k))
    attn = nx.matmul(nx.masked_softmax(scores, mask), v)
    if attention_only:
        return attn
    y = nx.layer_norm(nx.add(E, attn))
    hidden = nx.relu(_linear(y, params[f"ffn{layer}.w1"], params[f"ffn{layer}.b1"]))
    ff = _linear(hidden, params[f"ffn{layer}.w2"], params[f"ffn{layer}.b2"])
    return nx.layer_norm(nx.add(y, ff))


def sinusoidal_time_encoding(times: np.ndarray, d_model: int, scale: float = 1000.0) -> np.ndarray:
    """Fixed sin/cos features of the rescaled event times."""
    pos = (times - 1.0) * scale
    freqs = 1.0 / np.power(10000.0, 2 * (np.arange(d_model) // 2) / d_model)
    angles = pos[..., None] * freqs
    return np.where(np.arange(d_model) % 2 == 0, np.sin(angles), np.cos(angles))


@dataclass
class EncodedSequence:
    H: DiffTensor     # (B, n, d), L2-normalized rows
    e_S: DiffTensor   # (B, d)
    batch: SequenceBatch


def _window_average(batch: SequenceBatch, window: int) -> np.ndarray:
    n = batch.length
    j, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    band = (k <= j) & (k > j - window)
    W = band[None] & batch.valid[:, None, :]
    W = W.astype(np.float64)
    W /= np.maximum(W.sum(axis=2, keepdims=True), 1.0)
    return W


def encode(batch: SequenceBatch, params: dict, n_layers: int = 1, causal: bool = True,
           attention_only: bool = False, pooling: str = "layers", window: int = 3,
           time_encoding: bool = False) -> EncodedSequence:
    """Stack attention layers, pool, L2-normalize each position, sum-pool the user.

    ``pooling="layers"`` averages the per-layer outputs position-wise;
    ``"window"`` averages the last layer's output over a causal window of
    ``window`` positions.
    """
    if batch.size == 0 or batch.lengths.min() == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    V = params["item_embedding"]
    x = embed(V, batch.items)
    if time_encoding:
        x = nx.add(x, nx.constant(sinusoidal_time_encoding(batch.times, V.shape[1])))
    mask = batch.attention_mask(causal)
    outputs = []
    for layer in range(n_layers):
        x = attention_layer(x, mask, params, layer, attention_only)
        outputs.append(x)
    if pooling == "layers":
        pooled = outputs[0]
        for o in outputs[1:]:
            pooled = nx.add(pooled, o)
        if n_layers > 1:
            pooled = nx.scale(pooled, 1.0 / n_layers)
    elif pooling == "window":
        pooled = nx.matmul(nx.constant(_window_average(batch, window)), outputs[-1])
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    H = nx.l2_normalize(pooled)
    B, n, d = H.shape
    weights = nx.constant(batch.valid.astype(np.float64)[:, None, :])
    e_S = nx.reshape(nx.matmul(weights, H), (B, d))
    return EncodedSequence(H, e_S, batch)


def intensity_base(h_prev: DiffTensor, params: dict) -> DiffTensor:
    """History term of each polarity's intensity, shape (M, 2)."""
    x = h_prev
    k = 0
    while f"intensity.hidden{k}.w" in params:
        x = nx.tanh(_linear(x, params[f"intensity.hidden{k}.w"], params[f"intensity.hidden{k}.b"]))
        k += 1
    return _linear(x, params["intensity.w"], params["intensity.b"])


def intensity_from_base(base: DiffTensor, elapsed_ratio: np.ndarray, params: dict) -> DiffTensor:
    """``softplus_beta(alpha_z * ratio + base_z, beta_z)`` for a (M, 2) base.

    ``elapsed_ratio`` is ``(t - t_j) / t_j`` with shape (M,) or (M, 2).
    """
    M = base.shape[0]
    ratio = np.asarray(elapsed_ratio, dtype=np.float64)
    if ratio.ndim == 1:
        ratio = np.stack([ratio, ratio], axis=1)
    alpha = nx.repeat_rows(params["intensity.alpha"], M)
    beta = nx.repeat_rows(nx.exp(params["intensity.log_beta"]), M)
    return nx.softplus_beta(nx.add(nx.mul(alpha, nx.constant(ratio)), base), beta)


def elapsed_ratio(t, t_j) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    t_j = np.asarray(t_j, dtype=np.float64)
    if np.any(t_j <= 0):
        raise TimeNormalizationError("last event time must be positive; rescale timestamps first")
    if np.any(t < t_j):
        raise TimeNormalizationError("query time precedes the last event")
    return (t - t_j) / t_j


def intensity(h_prev: DiffTensor, t, t_j, params: dict) -> tuple:
    """Per-polarity and total conditional intensities for M query rows.

    ``h_prev`` is (M, d) or (d,); returns three (M,) tensors
    ``(lambda_pos, lambda_neg, lambda_total)``.
    """
    if h_prev.ndim == 1:
        h_prev = nx.reshape(h_prev, (1, h_prev.shape[0]))
    ratio = np.atleast_1d(elapsed_ratio(t, t_j))
    lam = intensity_from_base(intensity_base(h_prev, params), ratio, params)
    M = lam.shape[0]
    pick_pos = nx.constant(np.array([[1.0], [0.0]]))
    pick_neg = nx.constant(np.array([[0.0], [1.0]]))
    lam_pos = nx.reshape(nx.matmul(lam, pick_pos), (M,))
    lam_neg = nx.reshape(nx.matmul(lam, pick_neg), (M,))
    total = nx.reshape(nx.matmul(lam, nx.constant(np.ones((2, 1)))), (M,))
    return lam_pos, lam_neg, total


def polarity_from_intensities(lam_pos, lam_neg) -> np.ndarray:
    """Argmax of the intensity ratio; exact ties go to +1."""
    lam_pos = np.asarray(lam_pos, dtype=np.float64)
    lam_neg = np.asarray(lam_neg, dtype=np.float64)
    total = lam_pos + lam_neg
    return np.where(lam_pos / total >= lam_neg / total, 1, -1)


def predict_next_polarity(h_prev: DiffTensor, t_next, t_j, params: dict) -> np.ndarray:
    lam_pos, lam_neg, _ = intensity(h_prev, t_next, t_j, params)
    return polarity_from_intensities(lam_pos.values, lam_neg.values)


def transition_index(batch: SequenceBatch) -> tuple:
    """Flat positions of (previous, next) event pairs within each sequence.

    Returns ``(prev_flat, next_flat)`` indexing ``batch`` arrays reshaped to
    ``(B * n,)``.
    """
    B, n = batch.items.shape
    prev, nxt = [], []
    for b, m in enumerate(batch.lengths):
        base = b * n
        prev.extend(range(base, base + m - 1))
        nxt.extend(range(base + 1, base + m))
    return np.asarray(prev, dtype=np.int64), np.asarray(nxt, dtype=np.int64)
