"""Minimal reverse-mode autodiff over numpy arrays.

Tensors hold row-major float32 data by default (float64 is supported for
testing); reductions accumulate in float64 regardless of the storage dtype.
Graphs are built eagerly during the forward pass and freed after backward().
Forward values are never mutated, so repeated evaluation on identical inputs
is bit-identical.
"""

from __future__ import annotations

import contextlib
import ctypes
from typing import Callable, Sequence

import numpy as np

# Training churns through large short-lived arrays; glibc would mmap/munmap
# each one, stalling every step on page faults.  Keep big blocks on the heap.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except OSError:  # non-glibc platform; purely a performance knob
    pass

from . import _kernels as _k

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / sampling paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Tensor:
    """A dense array node in the autodiff graph.

    ``data`` is a numpy array (float32 or float64); ``grad`` is lazily
    allocated during backward and always matches ``data``'s shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Reverse-mode sweep from this node.

        Without an explicit seed the node must be scalar (size 1); the seed
        gradient is then 1.  Traversal order is the deterministic reverse of a
        DFS topological sort over ``_parents``.
        """
        if seed is None:
            if self.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self:
                node._parents = ()
                node._backward = None

    def _accumulate(self, g: np.ndarray):
        # out-of-place: gradient arrays may be shared between nodes (identity
        # pass-through ops), so they are never mutated once stored
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad = self.grad + g

    # operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Build an output node, recording the graph only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g * (2.0 * a.data))

    return _node(a.data * a.data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / data))

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # branch on sign so exp never overflows
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        a._accumulate(g * (data * (1.0 - data)))

    return _node(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; the backward pass is its exact derivative."""
    x = np.ascontiguousarray(a.data)
    data, t = _k.gelu_fwd(x)

    def backward(g):
        a._accumulate(_k.gelu_bwd(g, x, t))

    return _node(data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        mask = (a.data >= lo) & (a.data <= hi)
        a._accumulate(g * mask.astype(a.data.dtype))

    return _node(data, (a,), backward)


def maximum_const(a: Tensor, c: float) -> Tensor:
    """Hinge max(a, c); subgradient at ties goes to the constant side."""
    data = np.maximum(a.data, c)

    def backward(g):
        a._accumulate(g * (a.data > c).astype(a.data.dtype))

    return _node(data, (a,), backward)


# linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


# reductions (float64 accumulation) ---------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g.reshape(()) if g.ndim else g, a.shape).astype(a.data.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    data = (np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(a.data.dtype)
    inv = np.asarray(1.0 / n, dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to((g * inv).reshape(()) if g.ndim else g * inv, a.shape).astype(a.data.dtype))
            return
        gg = g * inv
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(data, (a,), backward)


# softmax / layernorm ------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    data = _k.softmax_fwd(a.data)

    def backward(g):
        a._accumulate(_k.softmax_bwd(g, data))

    return _node(data, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale/shift by gamma/beta (1-D, length D)."""
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    data, xhat, inv_std = _k.layer_norm_fwd(a.data, gamma.data, beta.data, eps)

    def backward(g):
        dx, dgamma, dbeta = _k.layer_norm_bwd(g, xhat, inv_std, gamma.data)
        if gamma.requires_grad:
            gamma._accumulate(dgamma)
        if beta.requires_grad:
            beta._accumulate(dbeta)
        if a.requires_grad:
            a._accumulate(dx)

    return _node(data, (a, gamma, beta), backward)


# structure ----------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(i != axis and other[i] != base[i] for i in range(len(base))):
            raise ShapeError("concat", *[t.shape for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + size)
                t._accumulate(g[tuple(sl)])
            start += size

    return _node(data, tuple(tensors), backward)


_SPLIT_SENTINEL = np.zeros((), dtype=np.float32)


def split(a: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    """Partition along an axis.

    Part gradients are gathered by an intermediate gate node and written
    back with one concatenate instead of per-part zero-filled buffers; the
    reverse-topological sweep runs the gate after every consumed part, so
    unused parts simply contribute zeros.
    """
    if sum(sizes) != a.shape[axis]:
        raise ShapeError("split", a.shape, (sum(sizes),))
    bounds = [0]
    for s in sizes:
        bounds.append(bounds[-1] + s)
    grads: list[np.ndarray | None] = [None] * len(sizes)
    parts: list[Tensor] = []

    def flush(_):
        if a.requires_grad:
            full = [grads[i] if grads[i] is not None else np.zeros_like(parts[i].data)
                    for i in range(len(sizes))]
            a._accumulate(np.concatenate(full, axis=axis))

    gate = _node(a.data, (a,), flush)

    def make_backward(slot):
        def backward(g):
            grads[slot] = g
            gate.grad = _SPLIT_SENTINEL  # arm the gate's flush
        return backward

    for i in range(len(sizes)):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        parts.append(_node(np.ascontiguousarray(a.data[tuple(sl)]), (gate,), make_backward(i)))
    return parts


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a._accumulate(full)

    return _node(np.ascontiguousarray(a.data[sl]), (a,), backward)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V×D) by an integer index array."""
    idx = np.asarray(idx)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table with {table.shape[0]} rows")
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accumulate(gt)

    return _node(data, (table,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; the result is a leaf that blocks all gradient flow."""
    return Tensor(a.data)


def straight_through(forward_value: Tensor, backward_surrogate: Tensor) -> Tensor:
    """Take forward_value's data, but route gradients to backward_surrogate
    with an identity Jacobian (the forward side receives none)."""
    if forward_value.shape != backward_surrogate.shape:
        raise ShapeError("straight_through", forward_value.shape, backward_surrogate.shape)

    def backward(g):
        if backward_surrogate.requires_grad:
            backward_surrogate._accumulate(g)

    return _node(forward_value.data.copy(), (backward_surrogate,), backward)
