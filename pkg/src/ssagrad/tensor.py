"""Dense float64 tensors with a fixed, reproducible summation order.

Every reduction in this module is defined as a sequential left fold in
ascending index order along the reduced axis, and full reductions fold
the leading axis repeatedly.  That makes results reproducible bit for
bit across runs and lets tests compare against naive loop oracles with
zero tolerance.  The numpy kernels used here (cumulative sums, plain
elementwise ufuncs) are bit-identical to those loops; the test suite
pins this down.

Transcendentals go through ``math`` one element at a time on purpose:
the scalar interpreter uses the same calls, so scalar and tensor paths
agree exactly.  That matters for the batching transform, whose contract
is bitwise equality with per-lane execution.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """A numerically undefined operation: div by zero, log of x <= 0."""


class DenseTensor:
    """An immutable rank >= 1 float64 tensor.

    Wraps a C-contiguous ndarray with the write flag cleared.  All
    operations return new tensors.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            raise ValueError("tensors have rank >= 1; use a plain float for scalars")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("DenseTensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    def tolist(self) -> list:
        return self.data.tolist()

    def flat(self) -> list[float]:
        return self.data.reshape(-1).tolist()

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape}, data={self.flat()})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool((self.data == other.data).all())

    def __hash__(self):
        return hash((self.shape, tuple(self.flat())))

    # -------------------------------------------------- constructors

    @staticmethod
    def from_flat(shape: Sequence[int], values: Iterable[float]) -> "DenseTensor":
        shape = tuple(int(d) for d in shape)
        arr = np.array(list(values), dtype=np.float64)
        n = 1
        for d in shape:
            n *= d
        if arr.size != n:
            raise ValueError(f"{arr.size} values for shape {shape}")
        return DenseTensor(arr.reshape(shape))

    @staticmethod
    def zeros(shape: Sequence[int]) -> "DenseTensor":
        return DenseTensor(np.zeros(tuple(shape), dtype=np.float64))

    @staticmethod
    def full(shape: Sequence[int], value: float) -> "DenseTensor":
        return DenseTensor(np.full(tuple(shape), float(value), dtype=np.float64))

    # -------------------------------------------------------- json

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "data": self.flat()}

    @staticmethod
    def from_json(obj: dict) -> "DenseTensor":
        return DenseTensor.from_flat(tuple(obj["shape"]), obj["data"])


# ------------------------------------------------------- broadcasting


def broadcast_shapes(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Unify two shapes by trailing alignment.

    Aligned extents must match or one of them must be 1.  Raises
    ValueError when the shapes are incompatible.
    """
    out: list[int] = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {a} and {b} do not broadcast")
        out.append(max(da, db))
    return tuple(reversed(out))


def can_expand(src: tuple[int, ...], dst: tuple[int, ...]) -> bool:
    """Whether ``src`` broadcasts to exactly ``dst`` (no shrinking)."""
    if len(src) > len(dst):
        return False
    for i in range(1, len(src) + 1):
        if src[-i] != dst[-i] and src[-i] != 1:
            return False
    return True


def bcast_to(x: "DenseTensor | float", shape: tuple[int, ...]) -> DenseTensor:
    """Replicate a scalar or a smaller tensor to ``shape``."""
    if isinstance(x, DenseTensor):
        if not can_expand(x.shape, shape):
            raise ValueError(f"cannot broadcast {x.shape} to {shape}")
        return DenseTensor(np.broadcast_to(x.data, shape))
    return DenseTensor.full(shape, float(x))


# ------------------------------------------------- elementwise kernels


def elementwise_zip(f: Callable[..., float], *args: "DenseTensor | float") -> "DenseTensor | float":
    """Apply a scalar function over broadcast-aligned elements.

    This is the generic per-element path: a plain loop in row-major
    order, no vectorization.  Dedicated kernels below are bit-compatible
    with it and exist only for speed.
    """
    shape: tuple[int, ...] = ()
    for a in args:
        if isinstance(a, DenseTensor):
            shape = broadcast_shapes(shape, a.shape)
    if not shape:
        return float(f(*(float(a) for a in args)))
    views = [
        np.broadcast_to(a.data, shape) if isinstance(a, DenseTensor) else None
        for a in args
    ]
    out = np.empty(shape, dtype=np.float64)
    for idx in np.ndindex(shape):
        vals = [
            float(v[idx]) if v is not None else float(a)
            for v, a in zip(views, args)
        ]
        out[idx] = f(*vals)
    return DenseTensor(out)


def _np2(op, a, b):
    da = a.data if isinstance(a, DenseTensor) else a
    db = b.data if isinstance(b, DenseTensor) else b
    return DenseTensor(op(da, db))


def add(a, b):
    if not isinstance(a, DenseTensor) and not isinstance(b, DenseTensor):
        return a + b
    return _np2(np.add, a, b)


def sub(a, b):
    if not isinstance(a, DenseTensor) and not isinstance(b, DenseTensor):
        return a - b
    return _np2(np.subtract, a, b)


def mul(a, b):
    if not isinstance(a, DenseTensor) and not isinstance(b, DenseTensor):
        return a * b
    return _np2(np.multiply, a, b)


def div(a, b):
    if not isinstance(b, DenseTensor):
        if b == 0.0:
            raise DomainError("division by zero")
        if not isinstance(a, DenseTensor):
            return a / b
    elif bool((b.data == 0.0).any()):
        raise DomainError("division by zero")
    return _np2(np.divide, a, b)


def neg(a):
    if not isinstance(a, DenseTensor):
        return -a
    return DenseTensor(np.negative(a.data))


def scalar_sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def scalar_relu(x: float) -> float:
    return x if x > 0.0 else 0.0


def scalar_pow_int(x: float, n: int) -> float:
    """x**n by left-to-right repeated multiplication, n >= 0."""
    acc = 1.0
    for _ in range(n):
        acc = acc * x
    return acc


def scalar_log(x: float) -> float:
    if x <= 0.0:
        raise DomainError(f"log of non-positive value {x!r}")
    return math.log(x)


_SCALAR_UNARY: dict[str, Callable[[float], float]] = {
    "exp": math.exp,
    "log": scalar_log,
    "tanh": math.tanh,
    "sigmoid": scalar_sigmoid,
    "relu": scalar_relu,
}


def unary_math(name: str, a: DenseTensor) -> DenseTensor:
    """Elementwise transcendental via per-element math.* calls."""
    f = _SCALAR_UNARY[name]
    flat = a.data.reshape(-1)
    out = np.fromiter((f(float(x)) for x in flat), dtype=np.float64, count=flat.size)
    return DenseTensor(out.reshape(a.shape))


def pow_int(a: DenseTensor, n: int) -> DenseTensor:
    flat = a.data.reshape(-1)
    out = np.fromiter(
        (scalar_pow_int(float(x), n) for x in flat), dtype=np.float64, count=flat.size
    )
    return DenseTensor(out.reshape(a.shape))


def compare(op: str, a, b) -> DenseTensor:
    """Elementwise comparison producing a 0/1 mask tensor."""
    da = a.data if isinstance(a, DenseTensor) else a
    db = b.data if isinstance(b, DenseTensor) else b
    if op == "lt":
        m = np.less(da, db)
    elif op == "gt":
        m = np.greater(da, db)
    elif op == "eq":
        m = np.equal(da, db)
    else:
        raise ValueError(op)
    return DenseTensor(m.astype(np.float64))


def select_mask(mask, a, b) -> DenseTensor:
    """Pick ``a`` where the mask is nonzero, ``b`` elsewhere, exactly."""
    md = mask.data if isinstance(mask, DenseTensor) else np.float64(mask)
    da = a.data if isinstance(a, DenseTensor) else a
    db = b.data if isinstance(b, DenseTensor) else b
    return DenseTensor(np.where(md != 0.0, da, db))


# --------------------------------------------------------- reductions


def _reduce_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    # cumsum is a sequential left fold; taking the last slice gives the
    # ascending-order sum along the axis, bit-identical to a loop.
    if arr.shape[axis] == 1:
        return arr.take(0, axis=axis)
    return np.cumsum(arr, axis=axis).take(-1, axis=axis)


def reduce_sum(t: DenseTensor, axis: "int | str") -> "DenseTensor | float":
    """Sum along one axis, or fold to a scalar with axis="all".

    axis="all" folds the leading axis repeatedly, so it is exactly
    reduce_sum(all, reduce_sum(0, x)) by construction.  axis="tail"
    keeps the leading axis and folds everything after it (the per-lane
    analogue of "all" for batched values).
    """
    if axis == "all":
        arr = t.data
        while arr.ndim > 1:
            arr = _reduce_axis(arr, 0)
        return _seq_sum(arr)
    if axis == "tail":
        arr = t.data
        while arr.ndim > 1:
            arr = _reduce_axis(arr, 1)
        return DenseTensor(arr)
    ax = int(axis)
    if not 0 <= ax < t.rank:
        raise ValueError(f"axis {ax} out of range for shape {t.shape}")
    if t.rank == 1:
        return float(_seq_sum(t.data))
    return DenseTensor(_reduce_axis(t.data, ax))


def _seq_sum(arr: np.ndarray) -> float:
    if arr.size == 1:
        return float(arr[0])
    return float(np.cumsum(arr)[-1])


def reduce_to(t: DenseTensor, shape: tuple[int, ...]) -> "DenseTensor | float":
    """Sum a tensor down to a broadcast-compatible smaller shape.

    Inverse of bcast_to: axes the broadcast expanded are folded in
    ascending index order.  An empty target shape yields a float.
    """
    if shape and not can_expand(shape, t.shape):
        raise ValueError(f"{shape} does not expand to {t.shape}")
    arr = t.data
    # fold extra leading axes the target lacks
    while arr.ndim > len(shape) and arr.ndim > 1:
        arr = _reduce_axis(arr, 0)
    if not shape:
        return _seq_sum(arr)
    # fold axes where the target extent is 1 but the source is larger
    for ax in range(len(shape)):
        if shape[ax] == 1 and arr.shape[ax] != 1:
            arr = np.expand_dims(_reduce_axis(arr, ax), ax)
    return DenseTensor(arr)


# ------------------------------------------------------ linear algebra


def matmul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Rank-2 matrix product with ascending-k summation order.

    The kernel forms all products and folds axis k with a cumulative
    sum, which is bit-identical to the triple loop
    ``for i: for j: for k: acc += a[i,k]*b[k,j]``.
    """
    if a.rank != 2 or b.rank != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes {a.shape} x {b.shape}")
    prod = a.data[:, :, None] * b.data[None, :, :]
    return DenseTensor(_reduce_axis(prod, 1))


def bmm(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Per-lane matmul on rank-3 operands, lane axis first."""
    if a.rank != 3 or b.rank != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shapes {a.shape} x {b.shape}")
    prod = a.data[:, :, :, None] * b.data[:, None, :, :]
    return DenseTensor(_reduce_axis(prod, 2))


def transpose(t: DenseTensor) -> DenseTensor:
    """Swap the last two axes (rank >= 2)."""
    if t.rank < 2:
        raise ValueError("transpose needs rank >= 2")
    return DenseTensor(np.swapaxes(t.data, -1, -2))


def reshape(t: DenseTensor, shape: tuple[int, ...]) -> DenseTensor:
    n = 1
    for d in shape:
        n *= d
    if n != t.data.size:
        raise ValueError(f"cannot reshape {t.shape} to {shape}")
    return DenseTensor(t.data.reshape(shape))


# ------------------------------------------------------ stacking


def stack(tensors: Sequence[DenseTensor], axis: int = 0) -> DenseTensor:
    if not tensors:
        raise ValueError("stack of nothing")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"stack of mismatched shapes {t.shape} vs {shape}")
    return DenseTensor(np.stack([t.data for t in tensors], axis=axis))


def unstack(t: DenseTensor, axis: int = 0) -> list["DenseTensor | float"]:
    """Split along an axis into the full list of slices."""
    return [take(t, i, axis) for i in range(t.shape[axis])]


def take(t: DenseTensor, index: int, axis: int = 0) -> "DenseTensor | float":
    """One slice along an axis; rank-1 input yields a plain float."""
    if not 0 <= index < t.shape[axis]:
        raise ValueError(f"index {index} out of range on axis {axis} of {t.shape}")
    sl = t.data.take(index, axis=axis)
    if sl.ndim == 0:
        return float(sl)
    return DenseTensor(sl)
