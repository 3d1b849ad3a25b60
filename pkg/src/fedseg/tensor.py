"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array and, when produced by an operation,
remembers its parents and a closure mapping the output gradient to parent
gradients.  :func:`backward` walks that implicit graph once in reverse
topological order.

Example:
    >>> w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> x = np.array([3.0, 4.0])
    >>> loss = tsum(mul(w, x))
    >>> backward(loss)
    >>> w.grad
    array([3., 4.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "mean",
    "log",
    "reciprocal",
    "clip",
    "relu",
    "sigmoid",
    "concat_channels",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=fn, op=op)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Raises:
        ShapeError: ``loss`` is not a scalar.
        NonFiniteError: the loss or any leaf gradient contains NaN/Inf.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss", loss.shape)
    if check_finite and not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {loss.data!r}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            if check_finite and not np.isfinite(node.grad).all():
                raise NonFiniteError("non-finite gradient reached a leaf tensor")
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant without promoting the dtype."""
    f = a.data.dtype.type(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,), "scale")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def reciprocal(a: Tensor) -> Tensor:
    x = a.data
    return _make(1 / x, (a,), lambda g: (-g / (x * x),), "reciprocal")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    x = a.data
    inside = ((x >= lo) & (x <= hi)).astype(x.dtype)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0)
    return _make(out, (a,), lambda g: (g * (x > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # keep the codomain open: float32 rounds sigmoid(17+) to exactly 1
    info = np.finfo(x.dtype)
    out = np.clip(out, info.tiny, 1 - info.epsneg)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack NHWC tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != base:
            raise ShapeError("concat requires equal N,H,W", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tensors, fn, "concat")
