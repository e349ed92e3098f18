"""Top-K ranking metrics with binary relevance."""

from __future__ import annotations

import math

import numpy as np


class EmptyRelevantError(ValueError):
    pass


def _check(ranked, relevant, k):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not relevant:
        raise EmptyRelevantError("relevant set is empty")
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")


def recall_at_k(ranked, relevant, k: int) -> float:
    relevant = set(relevant)
    _check(ranked, relevant, k)
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    relevant = set(relevant)
    _check(ranked, relevant, k)
    dcg = sum(1.0 / math.log2(p + 2) for p, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(relevant), k)))
    return dcg / idcg


def rank_items(scores: np.ndarray, exclude=None, k: int | None = None) -> np.ndarray:
    """Item indices by descending score, ties broken by ascending index.

    ``exclude`` items are dropped from the ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    if exclude is not None and len(exclude):
        drop = np.zeros(scores.size, dtype=bool)
        drop[np.fromiter(exclude, dtype=np.int64)] = True
        order = order[~drop[order]]
    return order if k is None else order[:k]
