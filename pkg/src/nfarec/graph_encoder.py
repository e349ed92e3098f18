"""Two-phase hypergraph convolution over the item-item graph.

Phase one diffuses item embeddings through the normalized adjacency,
``Lam <- A_hat @ elu(Lam @ W1)``, and averages each user's interacted rows.
Phase two relays the same item rows through the nonnegative part of the
multi-order feedback correlation before averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DiffTensor, DimensionError


class EmptyHyperedgeError(ValueError):
    pass


def init_hgc_params(rng: np.random.Generator, d_model: int) -> dict:
    # near-identity start keeps the diffused rows close to the embeddings
    w = np.eye(d_model) + rng.normal(0.0, 0.1 / np.sqrt(d_model), (d_model, d_model))
    return {"hgc.w1": nx.tensor(w, requires_grad=True)}


def hgc_forward(A_hat: np.ndarray, V: DiffTensor, params: dict, n_layers: int = 1) -> DiffTensor:
    n_items, d = V.shape
    if A_hat.shape != (n_items, n_items):
        raise DimensionError(f"hgc_forward: A_hat {A_hat.shape} does not match {n_items} items")
    W1 = params["hgc.w1"]
    A = nx.constant(A_hat)
    lam = V
    for _ in range(n_layers):
        lam = nx.matmul(A, nx.elu(nx.matmul(lam, W1)))
    return lam


def _pooling_matrix(hyperedges: np.ndarray) -> np.ndarray:
    H = np.asarray(hyperedges, dtype=np.float64)
    if H.ndim == 1:
        H = H[None, :]
    counts = H.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyHyperedgeError(f"user row {int(np.argmin(counts))} has an empty hyperedge")
    return H / counts[:, None]


def user_structural_rep(lam: DiffTensor, hyperedges: np.ndarray) -> DiffTensor:
    """Mean of ``lam`` rows selected by each user's 0/1 hyperedge, (U, d)."""
    return nx.matmul(nx.constant(_pooling_matrix(hyperedges)), lam)


def feedback_relay(hyperedges: np.ndarray, X_masked: np.ndarray) -> np.ndarray:
    """``h_u X_masked / |h_u|`` for every user, the constant half of phase two."""
    if np.any(np.asarray(X_masked) < 0):
        raise ValueError("X_masked must be entrywise nonnegative")
    return _pooling_matrix(hyperedges) @ X_masked


def feedback_aware_rep(lam: DiffTensor, hyperedges: np.ndarray, X_masked: np.ndarray,
                       relay: np.ndarray | None = None) -> DiffTensor:
    """``(1/|h_u|) h_u^T X_masked lam`` per user, (U, d).

    Pass a precomputed ``relay`` (from :func:`feedback_relay`) to skip the
    ``|U| x |I| x |I|`` product on repeated calls.
    """
    if relay is None:
        relay = feedback_relay(hyperedges, X_masked)
    return nx.matmul(nx.constant(relay), lam)


@dataclass
class StructuralReps:
    lam: DiffTensor
    e_H1: DiffTensor
    e_H2: DiffTensor


def structural_reps(A_hat: np.ndarray, X_masked: np.ndarray, hyperedges: np.ndarray,
                    V: DiffTensor, params: dict, n_layers: int = 1,
                    relay: np.ndarray | None = None, literal: bool = False) -> StructuralReps:
    if literal:
        return _literal_reps(A_hat, X_masked, hyperedges, V, params, n_layers)
    lam = hgc_forward(A_hat, V, params, n_layers)
    return StructuralReps(lam, user_structural_rep(lam, hyperedges),
                          feedback_aware_rep(lam, hyperedges, X_masked, relay))


def _literal_reps(A_hat, X_masked, hyperedges, V, params, n_layers) -> StructuralReps:
    """Per-user diffusion scaled by the scalar ``h_u A_hat h_u^T``.

    Costs one ``|I| x d`` chain per user; meant for comparisons on small data.
    """
    H = np.asarray(hyperedges, dtype=np.float64)
    P = _pooling_matrix(H)
    W1 = params["hgc.w1"]
    rows1, rows2 = [], []
    for u in range(H.shape[0]):
        s = float(H[u] @ A_hat @ H[u])
        lam = V
        for _ in range(n_layers):
            lam = nx.scale(nx.elu(nx.matmul(lam, W1)), s)
        rows1.append(nx.matmul(nx.constant(P[u:u + 1]), lam))
        rows2.append(nx.matmul(nx.constant(P[u:u + 1] @ X_masked), lam))
    lam_global = hgc_forward(A_hat, V, params, n_layers)
    return StructuralReps(lam_global, nx.concat_rows(rows1), nx.concat_rows(rows2))
