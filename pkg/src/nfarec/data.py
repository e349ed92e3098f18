"""Interaction logs to model-ready structures.

Covers parsing, polarity labelling, min-count filtering, the per-user
chronological split, the item-item adjacency and its symmetric
normalization, the signed multi-order feedback correlation matrices, and the
on-disk dataset bundle.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CORRELATION_MAGIC = b"NFARECX1"

DELIMITERS = {"comma": ",", "tab": "\t", "double-colon": "::"}


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class Schema:
    """Column layout of a delimiter-separated interaction file."""

    columns: tuple = ("user", "item", "rating", "timestamp")
    delimiter: str = ","
    rating_min: float = 1.0
    rating_max: float = 5.0

    def __post_init__(self):
        missing = {"user", "item", "rating", "timestamp"} - set(self.columns)
        if missing:
            raise SchemaError(f"schema lacks column(s): {', '.join(sorted(missing))}")


MOVIELENS_SCHEMA = Schema(delimiter="::")
ML100K_SCHEMA = Schema(delimiter="\t")


@dataclass
class InteractionLog:
    records: list
    skipped: list = field(default_factory=list)  # (line number, reason)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _parse_row(parts: list, schema: Schema, lineno: int) -> InteractionRecord:
    if len(parts) < len(schema.columns):
        raise RowError(f"line {lineno}: expected {len(schema.columns)} fields, got {len(parts)}")
    row = dict(zip(schema.columns, (p.strip() for p in parts)))
    try:
        rating = float(row["rating"])
    except ValueError:
        raise RowError(f"line {lineno}: unparsable rating {row['rating']!r}") from None
    try:
        ts = int(row["timestamp"])
    except ValueError:
        try:
            ts_f = float(row["timestamp"])
        except ValueError:
            raise RowError(f"line {lineno}: unparsable timestamp {row['timestamp']!r}") from None
        if not ts_f.is_integer():
            raise RowError(f"line {lineno}: non-integer timestamp {row['timestamp']!r}")
        ts = int(ts_f)
    if ts < 0:
        raise RowError(f"line {lineno}: negative timestamp {ts}")
    if not (schema.rating_min <= rating <= schema.rating_max) or math.isnan(rating):
        raise RowError(f"line {lineno}: rating {rating} outside [{schema.rating_min}, {schema.rating_max}]")
    return InteractionRecord(row["user"], row["item"], rating, ts)


def load_interactions(path, schema: Schema = Schema(), lenient: bool = False) -> InteractionLog:
    """Parse an interaction file in file order.

    A first line whose fields equal the column names is treated as a
    header.  Bad rows raise :class:`RowError` unless ``lenient``, in which
    case they are skipped and listed in ``InteractionLog.skipped``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    records, skipped = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(schema.delimiter)
            if lineno == 1 and [p.strip().lower() for p in parts[:len(schema.columns)]] == list(schema.columns):
                continue
            try:
                records.append(_parse_row(parts, schema, lineno))
            except RowError as exc:
                if not lenient:
                    raise
                skipped.append((lineno, str(exc)))
    if skipped:
        log.warning("skipped %d malformed row(s) in %s", len(skipped), path)
    return InteractionLog(records, skipped)


def polarity_of(rating: float, threshold: float = 4.0) -> int:
    return 1 if rating >= threshold else -1


def filter_min_interactions(records: Sequence[InteractionRecord], n: int) -> list:
    """Drop users and items with fewer than ``n`` interactions, to a fixed point."""
    if n < 1:
        raise ValueError(f"minimum interaction count must be >= 1, got {n}")
    kept = list(records)
    while True:
        users: dict = {}
        items: dict = {}
        for r in kept:
            users[r.user_id] = users.get(r.user_id, 0) + 1
            items[r.item_id] = items.get(r.item_id, 0) + 1
        nxt = [r for r in kept if users[r.user_id] >= n and items[r.item_id] >= n]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise EmptyDatasetError(f"no interactions survive the min-interaction filter (n={n})")
    return kept


@dataclass
class FeedbackGraph:
    """Signed user-item graph plus per-user chronological sequences.

    ``sequences[u]`` holds ``(item, timestamp, polarity, rating)`` tuples in
    time order.  ``zeta`` is dense int8 with entries in {+1, -1, 0}.
    """

    user_ids: list
    item_ids: list
    zeta: np.ndarray
    sequences: list

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def user_index(self) -> dict:
        return {u: i for i, u in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict:
        return {u: i for i, u in enumerate(self.item_ids)}

    @property
    def n_interactions(self) -> int:
        return int(np.count_nonzero(self.zeta))

    def hyperedges(self) -> np.ndarray:
        """0/1 user-by-item incidence of the graph's interactions."""
        return (self.zeta != 0).astype(np.float64)

    def with_sequences(self, sequences: list) -> "FeedbackGraph":
        zeta = np.zeros_like(self.zeta)
        for u, seq in enumerate(sequences):
            for item, _, pol, _ in seq:
                zeta[u, item] = pol
        return FeedbackGraph(self.user_ids, self.item_ids, zeta, sequences)


def build_graph(records: Iterable[InteractionRecord], threshold: float = 4.0) -> FeedbackGraph:
    """Index users/items by first appearance; sort each user's events by time.

    Timestamp ties keep input order.  A repeated (user, item) pair keeps
    every event in the sequence; ``zeta`` takes the latest polarity.
    """
    user_index: dict = {}
    item_index: dict = {}
    per_user: list = []
    for r in records:
        u = user_index.setdefault(r.user_id, len(user_index))
        i = item_index.setdefault(r.item_id, len(item_index))
        if u == len(per_user):
            per_user.append([])
        per_user[u].append((i, r.timestamp, polarity_of(r.rating, threshold), r.rating))
    sequences = [sorted(seq, key=lambda e: e[1]) for seq in per_user]  # sort is stable
    zeta = np.zeros((len(user_index), len(item_index)), dtype=np.int8)
    for u, seq in enumerate(sequences):
        for item, _, pol, _ in seq:
            zeta[u, item] = pol
    return FeedbackGraph(list(user_index), list(item_index), zeta, sequences)


def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple:
    """Per-user (train, validation, test) counts.

    Train takes ``floor(r0*n)``; validation ``floor(r1*n)`` raised to 1 when
    that still leaves a test event; test gets the rest.  Fewer than three
    events are all train.
    """
    if n < 3:
        return n, 0, 0
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    if n_val == 0 and n - n_train - 1 >= 1:
        n_val = 1
    n_test = n - n_train - n_val
    return n_train, n_val, n_test


@dataclass
class SplitDataset:
    train: FeedbackGraph
    validation: FeedbackGraph
    test: FeedbackGraph
    ratios: tuple
    flagged_users: list  # users kept train-only

    @property
    def full_sequences(self) -> list:
        return [a + b + c for a, b, c in zip(self.train.sequences, self.validation.sequences,
                                             self.test.sequences)]

    def split_of(self, name: str) -> FeedbackGraph:
        try:
            return {"train": self.train, "validation": self.validation, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def report(self) -> str:
        lines = [f"ratios\t{':'.join(f'{r:g}' for r in self.ratios)}"]
        for name in ("train", "validation", "test"):
            g = self.split_of(name)
            lines.append(f"{name}_interactions\t{sum(len(s) for s in g.sequences)}")
        lines.append(f"train_only_users\t{len(self.flagged_users)}")
        for u in self.flagged_users:
            lines.append(f"flagged\t{self.train.user_ids[u]}")
        return "\n".join(lines) + "\n"


def chronological_split(graph: FeedbackGraph, ratios=(0.7, 0.1, 0.2)) -> SplitDataset:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positives summing to 1, got {ratios}")
    parts = ([], [], [])
    flagged = []
    for u, seq in enumerate(graph.sequences):
        a, b, _ = split_sizes(len(seq), ratios)
        if len(seq) < 3:
            flagged.append(u)
        parts[0].append(seq[:a])
        parts[1].append(seq[a:a + b])
        parts[2].append(seq[a + b:])
    train, val, test = (graph.with_sequences(p) for p in parts)
    return SplitDataset(train, val, test, ratios, flagged)


# -- item-item structures ----------------------------------------------------

def build_item_adjacency(train: FeedbackGraph, self_loops: bool = True) -> np.ndarray:
    """``a_ij = 1`` when some user interacted with both items."""
    if train.n_interactions == 0:
        raise EmptyDatasetError("adjacency needs a nonempty training view")
    return _adjacency_from_incidence(train.hyperedges(), self_loops)


def _adjacency_from_incidence(inc: np.ndarray, self_loops: bool) -> np.ndarray:
    A = ((inc.T @ inc) > 0).astype(np.float64)
    if not self_loops:
        np.fill_diagonal(A, 0.0)
    return A


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """``D^-1/2 A D^-1/2`` with zero-degree rows and columns left at zero."""
    deg = np.count_nonzero(A, axis=1).astype(np.float64)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


@dataclass
class CorrelationSet:
    A: np.ndarray
    A_hat: np.ndarray
    X_orders: list
    X_hat: np.ndarray
    X_masked: np.ndarray

    @property
    def order_count(self) -> int:
        return len(self.X_orders)


def feedback_correlation_orders(zeta: np.ndarray, orders: int) -> list:
    """First-order ``Z^T Z / |U|`` followed by ``X <- X X / |I|`` repeatedly."""
    if orders < 1:
        raise ValueError(f"feedback correlation needs at least one order, got {orders}")
    Z = np.asarray(zeta, dtype=np.float64)
    n_users, n_items = Z.shape
    X = (Z.T @ Z) / n_users
    out = [X]
    for _ in range(orders - 1):
        X = (X @ X) / n_items
        out.append(X)
    return out


def build_feedback_correlation(zeta: np.ndarray, orders: int = 2,
                               self_loops: bool = True) -> CorrelationSet:
    X_orders = feedback_correlation_orders(zeta, orders)
    X_hat = np.sum(X_orders, axis=0)
    A = _adjacency_from_incidence((np.asarray(zeta) != 0).astype(np.float64), self_loops)
    return CorrelationSet(A=A, A_hat=normalize_adjacency(A), X_orders=X_orders,
                          X_hat=X_hat, X_masked=np.maximum(X_hat, 0.0))


def normalize_times(timestamps, t_min: float, span: float) -> np.ndarray:
    """Map raw seconds onto ``1 + (t - t_min) / span``; a zero span maps to 1."""
    t = np.asarray(timestamps, dtype=np.float64)
    if span <= 0:
        return np.ones_like(t)
    return 1.0 + (t - t_min) / span


# -- statistics ---------------------------------------------------------------

def dataset_statistics(graph: FeedbackGraph) -> dict:
    n_events = sum(len(s) for s in graph.sequences)
    n_pos = sum(1 for s in graph.sequences for e in s if e[2] > 0)
    return {
        "users": graph.n_users,
        "items": graph.n_items,
        "interactions": n_events,
        "positive_pct": 100.0 * n_pos / n_events if n_events else 0.0,
        "negative_pct": 100.0 * (n_events - n_pos) / n_events if n_events else 0.0,
        "avg_per_user": n_events / graph.n_users if graph.n_users else 0.0,
        "avg_per_item": n_events / graph.n_items if graph.n_items else 0.0,
    }


def format_statistics(stats: dict) -> str:
    return (
        f"#Users\t{stats['users']}\n"
        f"#Items\t{stats['items']}\n"
        f"#Interactions\t{stats['interactions']}\n"
        f"Perc.(#Pos/#Neg)\t{stats['positive_pct']:.2f}%/{stats['negative_pct']:.2f}%\n"
        f"Avg.(#U)\t{stats['avg_per_user']:.1f}\n"
        f"Avg.(#I)\t{stats['avg_per_item']:.1f}\n"
    )


# -- bundle I/O ---------------------------------------------------------------

@dataclass
class Bundle:
    split: SplitDataset
    correlation: CorrelationSet
    orders: int
    self_loops: bool
    fingerprint: str
    path: Path | None = None

    def correlation_for(self, orders: int, self_loops: bool | None = None) -> CorrelationSet:
        self_loops = self.self_loops if self_loops is None else self_loops
        if orders == self.orders and self_loops == self.self_loops:
            return self.correlation
        return build_feedback_correlation(self.split.train.zeta, orders, self_loops)


def prepare_bundle(records: Sequence[InteractionRecord], threshold: float = 4.0,
                   min_interactions: int = 1, ratios=(0.7, 0.1, 0.2),
                   orders: int = 2, self_loops: bool = True) -> Bundle:
    kept = filter_min_interactions(records, min_interactions)
    split = chronological_split(build_graph(kept, threshold), ratios)
    corr = build_feedback_correlation(split.train.zeta, orders, self_loops)
    return Bundle(split, corr, orders, self_loops, _fingerprint(split))


def _interaction_lines(split: SplitDataset) -> list:
    lines = []
    for name in ("train", "validation", "test"):
        for u, seq in enumerate(split.split_of(name).sequences):
            for item, ts, pol, rating in seq:
                lines.append(f"{u}\t{item}\t{ts}\t{rating!r}\t{pol}\t{name}")
    return lines


def _fingerprint(split: SplitDataset) -> str:
    h = hashlib.sha256()
    h.update("\n".join(split.train.user_ids).encode())
    h.update(b"\x00")
    h.update("\n".join(split.train.item_ids).encode())
    h.update(b"\x00")
    h.update("\n".join(_interaction_lines(split)).encode())
    return h.hexdigest()[:16]


def _write_coo(path: Path, M: np.ndarray, fmt) -> None:
    rows, cols = np.nonzero(M)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{M.shape[0]} {M.shape[1]} {len(rows)}\n")
        for r, c in zip(rows, cols):
            fh.write(f"{r} {c} {fmt(M[r, c])}\n")


def _read_coo(path: Path, dtype) -> np.ndarray:
    with path.open(encoding="utf-8") as fh:
        n, m, _ = (int(x) for x in fh.readline().split())
        M = np.zeros((n, m), dtype=dtype)
        for line in fh:
            r, c, v = line.split()
            M[int(r), int(c)] = dtype(float(v))
    return M


def write_correlation_binary(path, X_hat: np.ndarray, X_masked: np.ndarray) -> None:
    n = X_hat.shape[0]
    with open(path, "wb") as fh:
        fh.write(CORRELATION_MAGIC)
        fh.write(struct.pack("<Q", n))
        fh.write(np.ascontiguousarray(X_hat, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(X_masked, dtype="<f8").tobytes())


def read_correlation_binary(path) -> tuple:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CORRELATION_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (n,) = struct.unpack("<Q", fh.read(8))
        X_hat = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n).astype(np.float64)
        X_masked = np.frombuffer(fh.read(8 * n * n), dtype="<f8").reshape(n, n).astype(np.float64)
    return X_hat, X_masked


def save_bundle(bundle: Bundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    split = bundle.split
    (d / "users.txt").write_text("".join(f"{i}\t{u}\n" for i, u in enumerate(split.train.user_ids)),
                                 encoding="utf-8")
    (d / "items.txt").write_text("".join(f"{i}\t{u}\n" for i, u in enumerate(split.train.item_ids)),
                                 encoding="utf-8")
    (d / "interactions.tsv").write_text("\n".join(_interaction_lines(split)) + "\n", encoding="utf-8")
    _write_coo(d / "zeta.coo", split.train.zeta, lambda v: str(int(v)))
    _write_coo(d / "adjacency.coo", bundle.correlation.A, lambda v: str(int(v)))
    write_correlation_binary(d / "correlation.bin", bundle.correlation.X_hat, bundle.correlation.X_masked)
    (d / "split_report.txt").write_text(split.report(), encoding="utf-8")
    ratios = ":".join(repr(r) for r in split.ratios)
    (d / "meta.txt").write_text(
        f"fingerprint = {bundle.fingerprint}\norders = {bundle.orders}\n"
        f"self_loops = {str(bundle.self_loops).lower()}\nratios = {ratios}\n",
        encoding="utf-8")
    bundle.path = d
    return d


def _read_index(path: Path) -> list:
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        _, ident = line.split("\t", 1)
        out.append(ident)
    return out


def load_bundle(directory) -> Bundle:
    d = Path(directory)
    if not (d / "meta.txt").exists():
        raise FileNotFoundError(f"not a dataset bundle: {d}")
    meta = dict(line.split(" = ", 1) for line in (d / "meta.txt").read_text(encoding="utf-8").splitlines()
                if line.strip())
    user_ids = _read_index(d / "users.txt")
    item_ids = _read_index(d / "items.txt")
    parts = {"train": [[] for _ in user_ids], "validation": [[] for _ in user_ids],
             "test": [[] for _ in user_ids]}
    for line in (d / "interactions.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        u, i, ts, rating, pol, name = line.split("\t")
        parts[name][int(u)].append((int(i), int(ts), int(pol), float(rating)))
    empty = FeedbackGraph(user_ids, item_ids, np.zeros((len(user_ids), len(item_ids)), np.int8), [])
    ratios = tuple(float(r) for r in meta["ratios"].split(":"))
    flagged = [u for u, seq in enumerate(parts["train"])
               if len(seq) + len(parts["validation"][u]) + len(parts["test"][u]) < 3]
    split = SplitDataset(empty.with_sequences(parts["train"]), empty.with_sequences(parts["validation"]),
                         empty.with_sequences(parts["test"]), ratios, flagged)
    zeta = _read_coo(d / "zeta.coo", np.int8)
    if not np.array_equal(zeta, split.train.zeta):
        raise ValueError(f"{d}: zeta.coo disagrees with interactions.tsv")
    A = _read_coo(d / "adjacency.coo", np.float64)
    X_hat, X_masked = read_correlation_binary(d / "correlation.bin")
    orders = int(meta["orders"])
    corr = CorrelationSet(A, normalize_adjacency(A), [], X_hat, X_masked)
    fingerprint = _fingerprint(split)
    if fingerprint != meta["fingerprint"]:
        raise ValueError(f"{d}: fingerprint mismatch ({fingerprint} != {meta['fingerprint']})")
    return Bundle(split, corr, orders, meta["self_loops"] == "true", fingerprint, d)
