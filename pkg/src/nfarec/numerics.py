"""Dense reverse-mode differentiation on float64 numpy arrays.

Every operation returns a new :class:`DiffTensor` holding its parents and a
closure that pushes the output gradient back to them.  ``backward`` orders
the reachable nodes topologically (the :class:`ComputationRecord`) and
replays the closures in reverse.

Shapes are never broadcast.  Call sites align shapes explicitly, usually by
a matmul against a ones vector.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12
SOFTPLUS_LINEAR_CUTOFF = 30.0
_TINY = np.finfo(np.float64).tiny

_ids = itertools.count()


class DimensionError(ValueError):
    pass


class ParameterDomainError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


class DiffTensor:
    """A float64 array with an attached gradient buffer."""

    __slots__ = ("values", "_grad", "requires_grad", "node_id", "_parents",
                 "_backward", "op", "_consumed")

    def __init__(self, values, requires_grad: bool = False, *,
                 _parents: tuple = (), _backward: Callable | None = None,
                 op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def backward(self) -> "ComputationRecord":
        """Back-propagate from this scalar node; returns the replayed record."""
        if self.values.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward() already ran on this graph; rebuild the forward pass")
        record = ComputationRecord.trace(self)
        self._accumulate(np.ones_like(self.values))
        for node in reversed(record.nodes):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)
        # intermediates release their buffers; leaves keep theirs
        for node in record.nodes:
            if node._backward is not None:
                node._grad = None
                node._backward = None
                node._parents = ()
        self._consumed = True
        return record

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class ComputationRecord:
    """Nodes reachable from a root, every node after all of its inputs."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: DiffTensor) -> "ComputationRecord":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def tensor(values, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(values, requires_grad=requires_grad)


def constant(values) -> DiffTensor:
    return DiffTensor(values, requires_grad=False)


def _as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _make(values, parents: Sequence[DiffTensor], backward, op: str) -> DiffTensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return DiffTensor(values, op=op)
    return DiffTensor(values, requires_grad=True, _parents=tuple(parents),
                      _backward=backward, op=op)


def _check_same(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> DiffTensor:
    """Matrix product.

    Accepts ``(m,k)@(k,n)`` and the batched form ``(B,m,k)@(B,k,n)``; a
    ``(B,m,k)@(k,n)`` call shares the right operand across the batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
        or (a.ndim == 3 and b.ndim == 2 and a.shape[2] == b.shape[0])
    )
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad:
            if av.ndim == 3 and bv.ndim == 2:
                b._accumulate(av.reshape(-1, av.shape[2]).T @ g.reshape(-1, g.shape[2]))
            else:
                b._accumulate(np.swapaxes(av, -1, -2) @ g)

    return _make(out, (a, b), backward, "matmul")


def transpose(a: DiffTensor) -> DiffTensor:
    """Swap the last two axes."""
    out = np.swapaxes(a.values, -1, -2)

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(out, (a,), backward, "transpose")


def reshape(a: DiffTensor, shape: tuple) -> DiffTensor:
    old = a.shape
    out = a.values.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(old))

    return _make(out, (a,), backward, "reshape")


def take_rows(a: DiffTensor, index) -> DiffTensor:
    """Gather rows of a 2-D tensor; repeated indices sum their gradients."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        bad = index[(index < 0) | (index >= a.shape[0])][0]
        raise IndexError(f"row index {bad} out of range for {a.shape[0]} rows")
    out = a.values[index]

    def backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index.reshape(-1), g.reshape(-1, a.shape[1]))
        a._accumulate(full)

    return _make(out, (a,), backward, "take_rows")


def concat_rows(parts: Sequence[DiffTensor]) -> DiffTensor:
    parts = [_as_tensor(p) for p in parts]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ {sorted(widths)}")
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.values for p in parts], axis=0)

    def backward(g):
        start = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[start:start + n])
            start += n

    return _make(out, parts, backward, "concat_rows")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.values - b.values, (a, b), backward, "sub")


def mul(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * bv)
        if b.requires_grad:
            b._accumulate(g * av)

    return _make(av * bv, (a, b), backward, "mul")


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _make(a.values * c, (a,), backward, "scale")


def exp(a: DiffTensor) -> DiffTensor:
    out = np.exp(a.values)

    def backward(g):
        a._accumulate(g * out)

    return _make(out, (a,), backward, "exp")


def log(a: DiffTensor) -> DiffTensor:
    av = a.values
    if np.any(av <= 0):
        idx = tuple(int(i) for i in np.argwhere(av <= 0)[0])
        raise NumericError(f"log of non-positive value {av[idx]!r} at {idx}")

    def backward(g):
        a._accumulate(g / av)

    return _make(np.log(av), (a,), backward, "log")


def tanh(a: DiffTensor) -> DiffTensor:
    out = np.tanh(a.values)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), backward, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: DiffTensor) -> DiffTensor:
    out = _sigmoid(a.values)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def log_sigmoid(a: DiffTensor) -> DiffTensor:
    """``log(sigmoid(x))`` without overflow for large ``|x|``."""
    x = a.values
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accumulate(g * _sigmoid(-x))

    return _make(out, (a,), backward, "log_sigmoid")


def elu(a: DiffTensor, alpha: float = 1.0) -> DiffTensor:
    x = a.values
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)

    def backward(g):
        a._accumulate(g * np.where(x > 0, 1.0, neg + alpha))

    return _make(out, (a,), backward, "elu")


def relu(a: DiffTensor) -> DiffTensor:
    x = a.values

    def backward(g):
        a._accumulate(g * (x > 0))

    return _make(np.maximum(x, 0.0), (a,), backward, "relu")


def softplus_beta(x: DiffTensor, beta) -> DiffTensor:
    """``beta * log(1 + exp(x / beta))``, elementwise.

    ``beta`` is a positive float or a tensor shaped like ``x`` (then it is
    differentiated too).  Beyond ``|x/beta| > 30`` the linear asymptote (or
    the exponential tail) is used; the result is floored at the smallest
    normal double so it stays strictly positive.
    """
    x = _as_tensor(x)
    if isinstance(beta, DiffTensor):
        _check_same(x, beta, "softplus_beta")
        bv = beta.values
        b_tensor = beta
    else:
        bv = float(beta)
        b_tensor = None
    if np.any(np.asarray(bv) <= 0):
        raise ParameterDomainError(f"softplus_beta needs beta > 0, got min {np.min(bv)!r}")
    u = x.values / bv
    big = u > SOFTPLUS_LINEAR_CUTOFF
    small = u < -SOFTPLUS_LINEAR_CUTOFF
    mid = ~(big | small)
    sp = np.empty_like(u)
    sp[big] = u[big]
    sp[small] = np.exp(u[small])
    sp[mid] = np.log1p(np.exp(u[mid]))
    out = np.maximum(bv * sp, _TINY)
    sig = _sigmoid(u)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * sig)
        if b_tensor is not None and b_tensor.requires_grad:
            b_tensor._accumulate(g * (sp - u * sig))

    parents = (x,) if b_tensor is None else (x, b_tensor)
    return _make(out, parents, backward, "softplus_beta")


def masked_softmax(scores: DiffTensor, mask) -> DiffTensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Disallowed entries come out exactly zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise DimensionError(f"masked_softmax: mask {mask.shape} vs scores {scores.shape}")
    allowed = mask.any(axis=-1)
    if not allowed.all():
        row = tuple(int(i) for i in np.argwhere(~allowed)[0])
        raise DegenerateRowError(f"masked_softmax: row {row} has no allowed entry")
    s = np.where(mask, scores.values, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        scores._accumulate(p * (g - inner))

    return _make(p, (scores,), backward, "masked_softmax")


# -- reductions and normalizers --------------------------------------------

def sum(a: DiffTensor, axis: int | None = None) -> DiffTensor:  # noqa: A001
    out = a.values.sum(axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            a._accumulate(np.full(shape, float(g)))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(out, (a,), backward, "sum")


def mean(a: DiffTensor, axis: int | None = None) -> DiffTensor:
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l2_normalize(a: DiffTensor) -> DiffTensor:
    """Divide each vector along the last axis by ``max(norm, 1e-12)``."""
    x = a.values
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, EPS_NORM)
    out = x / denom
    active = norm > EPS_NORM

    def backward(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        ga = np.where(active, (g - out * radial) / denom, g / denom)
        a._accumulate(ga)

    return _make(out, (a,), backward, "l2_normalize")


def layer_norm(a: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Zero-mean, unit-variance normalization along the last axis (no affine)."""
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - out * gxm))

    return _make(out, (a,), backward, "layer_norm")


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (input position, flat coordinate)
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"grad_check {verdict}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tol:.1e}) at input {self.worst[0]} coord {self.worst[1]}, "
                f"{self.n_coords} coords")


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check(f: Callable[..., DiffTensor], inputs: Sequence[DiffTensor],
               h: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f(*inputs)`` must return a scalar tensor.  The relative error uses
    ``max(1, |a|, |n|)`` in the denominator so near-zero gradients are
    judged absolutely.  ``max_coords`` samples that many coordinates per
    input (all of them when ``None``).
    """
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if not np.isfinite(out.values).all():
        raise NumericError("grad_check: non-finite forward value at the base point")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    worst, worst_at, n = 0.0, (-1, -1), 0
    for pos, t in enumerate(inputs):
        flat = t.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f(*inputs).values
            flat[c] = orig - h
            fm = f(*inputs).values
            flat[c] = orig
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise NumericError(f"grad_check: non-finite value perturbing input {pos} coord {int(c)}")
            num = float(fp - fm) / (2 * h)
            err = _rel_err(float(analytic[pos].reshape(-1)[c]), num)
            n += 1
            if err > worst:
                worst, worst_at = err, (pos, int(c))
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(worst, worst_at, tol, n)


def repeat_rows(row: DiffTensor, m: int) -> DiffTensor:
    """Stack ``m`` copies of a ``(1, k)`` row as ``ones(m, 1) @ row``."""
    if row.ndim != 2 or row.shape[0] != 1:
        raise DimensionError(f"repeat_rows expects a (1, k) row, got {row.shape}")
    return matmul(constant(np.ones((m, 1))), row)
