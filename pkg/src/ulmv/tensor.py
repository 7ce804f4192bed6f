"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every differentiable operation returns a :class:`Tensor` whose ``node`` records
the operation tag, its parent tensors and a closure mapping the output gradient
to one gradient per parent.  :func:`backward` sorts the recorded graph
topologically and visits each node exactly once in reverse order.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "NonFiniteError", "tensor", "no_grad", "is_grad_enabled",
    "backward", "perturb_backward", "add", "sub", "mul", "div", "neg", "power",
    "exp", "log", "sum", "mean", "amax", "reshape", "transpose", "flip", "concat",
    "split", "clamp", "where_const",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward computation produces NaN or Inf."""


_STATE = threading.local()
_PERTURB: dict[str, float] = {}
_node_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def perturb_backward(op: str, factor: float = 1.01):
    """Test hook: scale every gradient emitted by nodes tagged ``op``."""
    _PERTURB[op] = factor
    try:
        yield
    finally:
        _PERTURB.pop(op, None)


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """N-dimensional float64 array taking part in the autodiff graph.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape which :func:`backward` accumulates into.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad = np.zeros_like(self.data) if (requires_grad and node is None) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def make_result(data: np.ndarray, parents: Iterable[Tensor], op: str,
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op output, recording a node when any parent needs a gradient."""
    _check_finite(data, op)
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, node=Node(op, parents, backward_fn))
    return Tensor(data)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad += g
            continue
        parent_grads = t.node.backward(g)
        factor = _PERTURB.get(t.node.op)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            _check_finite(pg, f"backward of {t.node.op}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data + b.data, (a, b), "add",
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data - b.data, (a, b), "sub",
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_result(a.data * b.data, (a, b), "mul",
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return make_result(out, (a, b), "div",
                       lambda g: (_unbroadcast(g / b.data, a.shape),
                                  _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_result(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    return make_result(a.data ** exponent, (a,), "power",
                       lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):  # reported by the finiteness check
        out = np.log(a.data)
    return make_result(out, (a,), "log", lambda g: (g / a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def where_const(mask: np.ndarray, a, value: float) -> Tensor:
    """``a`` where ``mask`` holds, a constant elsewhere."""
    a = _as_tensor(a)
    return make_result(np.where(mask, a.data, value), (a,), "where", lambda g: (g * mask,))


# reductions

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum",
                       lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return make_result(out, (a,), "mean",
                       lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def _bw(g):
        ga = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gk, axis)
        return (ga,)

    return make_result(out, (a,), "amax", _bw)


# shape manipulation

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return make_result(a.data.reshape(shape), (a,), "reshape",
                       lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), "transpose",
                       lambda g: (np.transpose(g, inverse),))


def flip(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    return make_result(np.flip(a.data, axis), (a,), "flip", lambda g: (np.flip(g, axis),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return make_result(out, parts, "concat", lambda g: tuple(np.split(g, sizes, axis=axis)))


def split(a, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split ``a`` into consecutive pieces of the given extents along ``axis``."""
    a = _as_tensor(a)
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        index = tuple(index)

        def _bw(g, index=index):
            ga = np.zeros_like(a.data)
            ga[index] = g
            return (ga,)

        out.append(make_result(a.data[index], (a,), "split", _bw))
        start += n
    return out
