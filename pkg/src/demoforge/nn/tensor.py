"""Reverse-mode differentiation over dense float64 numpy arrays.

A ``Tensor`` records the op that produced it and a closure that pushes the
output gradient back to its parents. ``backward`` walks the graph in reverse
topological order; the order is fixed by creation sequence, so gradient
accumulation is deterministic.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from ..errors import NonScalarLoss, NumericalError, ShapeMismatch

_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (inference, frozen models)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values produced by {op}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._id = next(_ids)
        self.op = op

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise NonScalarLoss(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in sorted(node._parents, key=lambda t: t._id):
                if p.requires_grad and p._id not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if parent.requires_grad and pg is not None:
                    grads[parent._id] = pg if parent._id not in grads else grads[parent._id] + pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))),
                 "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),), "neg")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: ((a, g * p * a.data ** (p - 1)),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: ((a, g / a.data),), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: ((a, g * out * (1.0 - out)),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)),)

    return _make(out, (a,), backward, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero wherever the clamp is active."""
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: ((a, g * mask),), "clip")


# -- reductions and shape ------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: ((a, g.transpose(inv)),), "transpose")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return ((a, full),)

    return _make(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, sizes, axis=axis)))

    return _make(out, tensors, backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out.copy(), (a,), lambda g: ((a, _unbroadcast(g, a.shape)),), "broadcast")


# -- linear algebra and fused layers ---------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (m,))

        def backward(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ((a, ga), (b, gb))

        return _make(out, (a, b), backward, "matmul")

    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(out, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((a, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layer_norm: gain/bias must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = rstd / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return ((x, gx), (gain, (g * xhat).sum(axis=red)), (bias, g.sum(axis=red)))

    return _make(out, (x, gain, bias), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding ids out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return ((table, full),)

    return _make(table.data[ids], (table,), backward, "embedding")


def mean_pool(x: Tensor, axis: int = -2) -> Tensor:
    return mean(x, axis=axis)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Full (non-causal) scaled dot-product attention.

    ``q``: (..., Tq, H), ``k``/``v``: (..., Tk, H) with H divisible by ``heads``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[-1] % heads:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {heads}")
    *lead, tq, h = q.shape
    tk = k.shape[-2]
    hd = h // heads

    def split(t, n):
        t = reshape(t, (*lead, n, heads, hd))
        nd = len(lead)
        return transpose(t, (*range(nd), nd + 1, nd, nd + 2))

    qh, kh, vh = split(q, tq), split(k, tk), split(v, tk)
    nd = len(lead)
    kt = transpose(kh, (*range(nd + 1), nd + 2, nd + 1))
    att = softmax(matmul(qh, kt) * (1.0 / math.sqrt(hd)), axis=-1)
    out = matmul(att, vh)
    out = transpose(out, (*range(nd), nd + 1, nd, nd + 2))
    return reshape(out, (*lead, tq, h))
