"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records its inputs
and a backward closure on the output.  ``backward`` walks that graph in
reverse topological order, so each recorded operation runs exactly once per
call.  Leaf gradients accumulate across calls until ``zero_grad``.

Shapes are never broadcast implicitly; use :func:`broadcast_to` when a
smaller tensor has to be expanded.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "AutogradError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "ones_like",
    "add",
    "sub",
    "mul",
    "div",
    "dot",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "square",
    "reshape",
    "flatten",
    "transpose",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "broadcast_to",
    "axis_matmul",
    "l2_norm",
    "backward",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class AutogradError(RuntimeError):
    """Raised for invalid backward requests."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """N-dimensional float tensor (32- or 64-bit) with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
        parents = tuple(parents)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return flatten(self)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _check_same(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------


def _scalar_op(a: Tensor, c: float, kind: str) -> Tensor:
    c = float(c)
    if kind == "add":
        return Tensor._from_op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_const")
    if kind == "mul":
        return Tensor._from_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "mul_const")
    raise ValueError(kind)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_op(a, b, "add")
    _check_same(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_op(a, -b, "add")
    _check_same(a, b, "subtract")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_op(a, b, "mul")
    _check_same(a, b, "multiply")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_op(a, 1.0 / float(b), "mul")
    _check_same(a, b, "divide")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / (2 * out),), "sqrt")


# -- products --------------------------------------------------------------


def dot(u: Tensor, v: Tensor) -> Tensor:
    """Inner product of two rank-1 tensors, returned as a 0-d tensor."""
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"dot expects rank-1 operands, got {u.shape} and {v.shape}")
    if u.shape != v.shape:
        raise ShapeError(f"dot: length mismatch {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    return Tensor._from_op(np.asarray(ud @ vd), (u, v), lambda g: (g * vd, g * ud), "dot")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def axis_matmul(x: Tensor, mat: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix along one axis: ``out[..., i, ...] = sum_k mat[i, k] x[..., k, ...]``.

    Used for interpolation and adaptive pooling, where the mixing matrix is
    fixed and only the input needs a gradient.
    """
    axis = axis % x.ndim
    mat = np.asarray(mat, dtype=x.dtype)
    if mat.ndim != 2 or mat.shape[1] != x.shape[axis]:
        raise ShapeError(f"axis_matmul: matrix {mat.shape} does not act on axis {axis} of {x.shape}")

    def apply(m, arr):
        return np.ascontiguousarray(np.moveaxis(np.tensordot(m, arr, axes=([1], [axis])), 0, axis))

    return Tensor._from_op(apply(mat, x.data), (x,), lambda g: (apply(mat.T, g),), "axis_matmul")


# -- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    n = int(np.prod(known)) if known else 1
    if shape.count(-1) > 1 or (-1 not in shape and n != x.size) or (-1 in shape and (n == 0 or x.size % n)):
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.size,))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose"
    )


def _normalize_index(index, shape):
    if not isinstance(index, tuple):
        index = (index,)
    if len(index) > len(shape):
        raise IndexError(f"too many indices for shape {shape}")
    for ix, extent in zip(index, shape):
        if isinstance(ix, (int, np.integer)):
            if not -extent <= ix < extent:
                raise IndexError(f"index {ix} out of range for extent {extent}")
        elif isinstance(ix, slice):
            for bound in (ix.start, ix.stop):
                if bound is not None and not -extent <= bound <= extent:
                    raise IndexError(f"slice bound {bound} out of range for extent {extent}")
        else:
            raise TypeError("only integer and slice indexing is supported")
    return index


def slice_(x: Tensor, index) -> Tensor:
    index = _normalize_index(index, x.shape)
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        out[index] += g
        return (out,)

    return Tensor._from_op(np.ascontiguousarray(x.data[index]), (x,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty sequence")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    lead = len(shape) - len(src)
    expanded = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g.reshape(src),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "broadcast")


# -- reductions ------------------------------------------------------------


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept), src).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def l2_norm(x: Tensor, axis) -> Tensor:
    """Euclidean norm over ``axis``; the subgradient at a zero vector is 0."""
    axes = _axes(axis, x.ndim)
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axes))
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def bw(g):
        denom = out.reshape(kept)
        safe = np.where(denom > 0, denom, 1)
        scale = np.where(denom > 0, g.reshape(kept) / safe, 0)
        return (xd * scale,)

    return Tensor._from_op(out, (x,), bw, "l2_norm")


# -- backward --------------------------------------------------------------


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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.size != 1:
        raise AutogradError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise AutogradError("backward called on a tensor that is not attached to a graph")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = np.reshape(pg, p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
