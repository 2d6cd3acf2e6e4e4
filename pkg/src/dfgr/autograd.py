"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
parents and a closure that maps the output gradient to parent gradients.
The graph is rebuilt on every forward pass; :func:`backward` walks it once
in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

LAYER_NORM_EPS = 1e-6

_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Switch newly created tensors between float64 (default) and float32."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = _sigmoid(x.data)
    y = x.data * s

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(y, (x,), backward, "silu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes.

    Gradients: dA = dC @ B^T and dB = A^T @ dC.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _make(np.swapaxes(x.data, a, b), (x,), backward, "swapaxes")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing. Advanced indexing goes through :func:`gather_rows`."""

    def backward(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _make(x.data[index], (x,), backward, "getitem")


def split(x: Tensor, parts: int, axis: int = -1) -> list[Tensor]:
    size = x.shape[axis]
    if size % parts:
        raise ShapeError(f"cannot split extent {size} into {parts} equal parts")
    w = size // parts
    axis = axis % x.ndim
    pieces = []
    for i in range(parts):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(i * w, (i + 1) * w)
        pieces.append(getitem(x, tuple(idx)))
    return pieces


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward, "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _make(np.asarray(x.data.mean()), (x,), backward, "mean")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """``table[ids]`` along axis 0; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(table.data[ids], (table,), backward, "gather_rows")


def gather_cols(table: Tensor, ids: np.ndarray) -> Tensor:
    """``table[:, ids]`` for a 2-D table; output shape ``(rows, *ids.shape)``."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.data)
        flat = g.reshape(table.shape[0], -1)
        for r in range(table.shape[0]):
            out[r] = np.bincount(ids.reshape(-1), weights=flat[r], minlength=table.shape[1])
        return (out,)

    return _make(table.data[:, ids], (table,), backward, "gather_cols")


# ---------------------------------------------------------------- loss


def masked_bce_with_logits(logits: Tensor, labels: np.ndarray, label_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over positions where ``label_mask`` is true.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` which is exact and never
    overflows. The gradient at a labeled logit is ``(sigmoid(z) - y) / count``.
    """
    z = logits.data
    m = np.asarray(label_mask, dtype=bool)
    if m.shape != z.shape:
        raise ShapeError(f"label_mask shape {m.shape} vs logits {z.shape}")
    count = int(m.sum())
    if count == 0:
        raise ValueError("masked_bce needs at least one labeled position")
    y = np.where(m, np.asarray(labels, dtype=z.dtype), 0.0)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.where(m, per, 0.0).sum() / count

    def backward(g):
        return (np.where(m, (_sigmoid(z) - y) * (g / count), 0.0),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward, "masked_bce")


# ---------------------------------------------------------------- graph


class Graph:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._topo(output)

    @staticmethod
    def _topo(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar seed, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
