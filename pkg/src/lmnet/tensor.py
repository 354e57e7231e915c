"""Dense tensors backed by contiguous numpy buffers, plus the core
differentiable primitives (elementwise algebra, reductions, matmul and
layout ops).

Binary ops accept two tensors of identical shape, or a tensor and a Python
scalar. There is no other broadcasting.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from . import autodiff, backend
from .autodiff import record
from .errors import NonFiniteError, ShapeError, SizeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_MAX_ELEMENTS = 2**62


def _as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    """Rank-N float32/float64 array with an optional autodiff node attached."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None and arr.dtype in (np.float32, np.float64):
            dt = arr.dtype
        else:
            dt = _as_dtype(dtype)
        self.data = np.asarray(arr, dtype=dt, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(_as_dtype(dtype)))

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad: np.ndarray | None = None) -> None:
        autodiff.backward(self, grad)

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- construction --------------------------------------------------------
def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    if math.prod(shape) > _MAX_ELEMENTS:
        raise SizeError(f"shape {shape} has too many elements")
    return shape


def full(shape: Sequence[int], value: float, dtype=None) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=_as_dtype(dtype)))


def zeros(shape: Sequence[int], dtype=None) -> Tensor:
    return full(shape, 0.0, dtype)


def ones(shape: Sequence[int], dtype=None) -> Tensor:
    return full(shape, 1.0, dtype)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NonFiniteError` if ``t`` has NaN/Inf entries."""
    if not np.all(np.isfinite(t.data)):
        bad = int(np.size(t.data) - np.count_nonzero(np.isfinite(t.data)))
        raise NonFiniteError(f"{what} has {bad} non-finite value(s)")
    return t


# -- elementwise -----------------------------------------------------------
def _binary_operands(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch {a.dtype} vs {b.dtype}")
        return a, b
    if a_t and isinstance(b, (int, float, np.floating, np.integer)):
        return a, float(b)
    raise TypeError(f"unsupported operands {type(a).__name__}, {type(b).__name__}")


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, Tensor):
        out = Tensor(a.data + b.data)
        return record(out, (a, b), lambda g: (g, g))
    out = Tensor(a.data + a.data.dtype.type(b))
    return record(out, (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, Tensor):
        out = Tensor(a.data - b.data)
        return record(out, (a, b), lambda g: (g, -g))
    out = Tensor(a.data - a.data.dtype.type(b))
    return record(out, (a,), lambda g: (g,))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(b, Tensor):
        ad, bd = a.data, b.data
        out = Tensor(ad * bd)
        return record(out, (a, b), lambda g: (g * bd, g * ad))
    s = a.data.dtype.type(b)
    out = Tensor(a.data * s)
    return record(out, (a,), lambda g: (g * s,))


def div(a, b) -> Tensor:
    """Elementwise quotient. Division by zero yields inf/nan; see :func:`check_finite`."""
    a, b = _binary_operands(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(b, Tensor):
            ad, bd = a.data, b.data
            out = Tensor(ad / bd)
            return record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
        s = a.data.dtype.type(b)
        out = Tensor(a.data / s)
    return record(out, (a,), lambda g: (g / s,))


def neg(a: Tensor) -> Tensor:
    return record(Tensor(-a.data), (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        r = 1.0 / a.data
    return record(Tensor(r), (a,), lambda g: (-g * r * r,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    autodiff.note_switch(mask)
    out = Tensor(np.where(mask, a.data, a.data.dtype.type(0)))
    return record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor(s)
    return record(out, (a,), lambda g: (g * s * (1 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return record(Tensor(e), (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(np.log(x))
    return record(out, (a,), lambda g: (g / x,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu, sigmoid, exp, ln."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "ln": log, "log": log, "neg": neg}
    if op in binary:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions ----------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(np.sum(a.data, axis=axes, keepdims=keepdims))
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return mul(sum_(a, axes, keepdims), 1.0 / count)


# -- matmul ----------------------------------------------------------------
def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return backend.kernels.gemm(np.ascontiguousarray(a), np.ascontiguousarray(b))


def gemm_nd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic ``a @ b`` with identical leading (batch) dims."""
    if a.ndim == 2:
        return _gemm(a, b)
    lead = a.shape[:-2]
    a2 = a.reshape(-1, *a.shape[-2:])
    b2 = b.reshape(-1, *b.shape[-2:])
    out = np.empty((a2.shape[0], a.shape[-2], b.shape[-1]), dtype=a.dtype)
    for i in range(a2.shape[0]):
        out[i] = _gemm(a2[i], b2[i])
    return out.reshape(*lead, a.shape[-2], b.shape[-1])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product summed left to right over the inner axis.

    Rank-2 operands, or higher-rank operands with identical leading dims.
    """
    if a.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs equal rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dims differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError("matmul dtype mismatch")
    ad, bd = a.data, b.data
    out = Tensor(gemm_nd(ad, bd))

    def bw(g):
        return (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g))

    return record(out, (a, b), bw)


# -- layout ------------------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    src = a.shape
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    return record(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat extent mismatch {ref.shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(out, tensors, bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full_g = np.zeros(shape, dtype=dtype)
        full_g[idx] = g
        return (full_g,)

    return record(out, (a,), bw)


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    return concat([reshape(v, (1,)) for v in values], 0)
