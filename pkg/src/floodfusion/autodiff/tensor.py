"""Dense fp64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to parent gradients. A graph is recorded only when at
least one input requires a gradient, so inference runs allocate no graph.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Sequence

import numpy as np

# Branch decisions of piecewise ops (relu sign patterns, pool argmaxes) are
# hashed here while a recorder is active, so a finite-difference probe can
# tell whether it stepped across a kink.
_KINK_LOG: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect a digest of every piecewise branch decision made inside the block."""
    global _KINK_LOG
    prev, log = _KINK_LOG, []
    _KINK_LOG = log
    try:
        yield log
    finally:
        _KINK_LOG = prev


def note_branch(decision: np.ndarray):
    if _KINK_LOG is not None:
        _KINK_LOG.append(hashlib.blake2b(np.ascontiguousarray(decision).tobytes(),
                                         digest_size=8).digest())


class ShapeError(ValueError):
    """Incompatible tensor shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False):
        backward(self, grad, retain_graph)

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph only when a parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None, retain_graph: bool = False):
    """Populate ``.grad`` of every leaf reachable from ``root``.

    Gradients accumulate additively, both across fan-out inside one graph and
    across repeated calls (call ``zero_grad`` between steps).
    """
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.size != 1:
            raise ShapeError("backward() without a seed gradient needs a scalar")
        grad = np.ones_like(root.data)
    order = _topo_order(root)
    pending = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if retain_graph:
            node.grad = g if node.grad is None else node.grad + g
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_op(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g) if _needs_add_at(index) else out.__setitem__(index, g)
        return (out,)

    return make_op(x.data[index], (x,), bw)


def _needs_add_at(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return make_op(data, xs, bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` else ``b`` (``cond`` is a constant)."""
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return make_op(np.where(c, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(c, g, 0.0), sa),
                              _unbroadcast(np.where(c, 0.0, g), sb)))


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    note_branch(pos)
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    note_branch(pos)
    scale = np.where(pos, 1.0, slope)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,))
