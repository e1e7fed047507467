"""Dense tensor values and the pure array operations built on them.

A `Tensor` is an immutable, C-contiguous, finite float array in single
(float32) or double (float64) precision.  Shapes are plain tuples of
positive extents; a rank-0 tensor holds a single scalar.  All operations
here return fresh tensors and never mutate their inputs; the backing
buffers are marked read-only to enforce that.

Elementwise binaries accept either two tensors of identical shape or a
rank-4 (N, C, H, W) tensor paired with a rank-1 per-channel vector of
length C (likewise rank-2 (N, D) with a length-D vector).  Anything
else is a shape error, not silent broadcasting.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .rng import Stream

Shape = tuple  # tuple of positive ints

_DTYPES = {"single": np.float32, "double": np.float64}
_PRECISIONS = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}


class ShapeError(ValueError):
    """Raised when extents, ranks, or precisions do not line up."""


class NonFiniteError(ShapeError):
    """Raised when values hold NaN/Inf; training maps this to divergence."""


def check_shape(shape: Sequence[int]) -> Shape:
    shape = tuple(shape)
    for d in shape:
        if not isinstance(d, (int, np.integer)) or d < 1:
            raise ShapeError(f"extents must be positive integers, got {shape}")
    return tuple(int(d) for d in shape)


class Tensor:
    """Immutable finite float array (see module docstring)."""

    __slots__ = ("data",)

    def __init__(self, data, precision: Optional[str] = None):
        if precision is not None:
            if precision not in _DTYPES:
                raise ShapeError(f"precision must be 'single' or 'double', got {precision!r}")
            arr = np.array(data, dtype=_DTYPES[precision])
        else:
            arr = np.array(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = _finalize(arr)

    @classmethod
    def _own(cls, arr: np.ndarray) -> "Tensor":
        # Internal: adopt a freshly computed float buffer without copying.
        t = cls.__new__(cls)
        t.data = _finalize(arr)
        return t

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def precision(self) -> str:
        return _PRECISIONS[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, precision: str) -> "Tensor":
        if precision not in _DTYPES:
            raise ShapeError(f"precision must be 'single' or 'double', got {precision!r}")
        return Tensor._own(self.data.astype(_DTYPES[precision]))

    def numpy(self) -> np.ndarray:
        """Writable copy of the backing buffer."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision})"


def _finalize(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in (np.float32, np.float64):
        raise ShapeError(f"tensors are float32/float64 only, got dtype {arr.dtype}")
    check_shape(arr.shape)
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor values must be finite (no NaN/Inf)")
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)  # keeps rank-0 intact (always contiguous)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# creation

def create(shape: Sequence[int], fill: float = 0.0, precision: str = "single") -> Tensor:
    shape = check_shape(shape)
    if precision not in _DTYPES:
        raise ShapeError(f"precision must be 'single' or 'double', got {precision!r}")
    return Tensor._own(np.full(shape, fill, dtype=_DTYPES[precision]))


def gaussian(shape: Sequence[int], seed: int, precision: str = "single") -> Tensor:
    """Unit-gaussian tensor; identical bits for identical (shape, seed)."""
    shape = check_shape(shape)
    n = int(np.prod(shape)) if shape else 1
    vals = Stream(seed).normal(n).reshape(shape)
    return Tensor._own(vals.astype(_DTYPES[precision]))


# ---------------------------------------------------------------------------
# elementwise

def _binary_operands(a: Tensor, b: Tensor):
    if a.precision != b.precision:
        raise ShapeError(f"precision mismatch: {a.precision} vs {b.precision}")
    if a.shape == b.shape:
        return a.data, b.data
    bv = _channel_view(b.data, a.shape)
    if bv is not None:
        return a.data, bv
    av = _channel_view(a.data, b.shape)
    if av is not None:
        return av, b.data
    raise ShapeError(f"operand shapes {a.shape} and {b.shape} do not line up")


def _channel_view(vec: np.ndarray, target: Shape):
    # per-channel vector against (N, C, H, W) or per-feature against (N, D)
    if vec.ndim != 1:
        return None
    if len(target) == 4 and vec.shape[0] == target[1]:
        return vec.reshape(1, -1, 1, 1)
    if len(target) == 2 and vec.shape[0] == target[1]:
        return vec.reshape(1, -1)
    return None


def add(a: Tensor, b: Tensor) -> Tensor:
    x, y = _binary_operands(a, b)
    return Tensor._own(x + y)


def sub(a: Tensor, b: Tensor) -> Tensor:
    x, y = _binary_operands(a, b)
    return Tensor._own(x - y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = _binary_operands(a, b)
    return Tensor._own(x * y)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    x, y = _binary_operands(a, b)
    return Tensor._own(np.maximum(x, y))


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor._own(a.data * a.data.dtype.type(factor))


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; accumulation runs in the operand precision."""
    if a.precision != b.precision:
        raise ShapeError(f"precision mismatch: {a.precision} vs {b.precision}")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return Tensor._own(a.data @ b.data)


# ---------------------------------------------------------------------------
# reductions

_REDUCE_KINDS = ("sum", "mean", "max", "argmax")

Axis = Union[None, int, tuple]


def reduce(kind: str, t: Tensor, axis: Axis = None):
    """Reduce over `axis` (None = all axes).

    sum/mean/max return a Tensor with the reduced axes dropped; argmax
    returns integer indexes (ties resolved toward the lowest index).
    """
    if kind not in _REDUCE_KINDS:
        raise ShapeError(f"unknown reduction {kind!r}")
    _check_axis(axis, t.data.ndim)
    if kind == "argmax":
        if axis is not None and not isinstance(axis, int):
            raise ShapeError("argmax reduces over a single axis or all elements")
        return np.argmax(t.data, axis=axis)
    fn = {"sum": np.sum, "mean": np.mean, "max": np.max}[kind]
    return Tensor._own(np.asarray(fn(t.data, axis=axis)))


def _check_axis(axis: Axis, rank: int):
    if axis is None:
        return
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or not (0 <= ax < rank):
            raise ShapeError(f"axis {axis} out of range for rank {rank}")
    if len(set(int(a) for a in axes)) != len(axes):
        raise ShapeError(f"duplicate axes in {axis}")


# ---------------------------------------------------------------------------
# concatenation / slicing along the channel (feature) axis

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1; a's channels precede b's."""
    if a.precision != b.precision:
        raise ShapeError(f"precision mismatch: {a.precision} vs {b.precision}")
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 4):
        raise ShapeError(f"concat_channels needs matching rank 2 or 4, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"non-channel extents differ: {a.shape} vs {b.shape}")
    return Tensor._own(np.concatenate([a.data, b.data], axis=1))


def channel_slice(t: Tensor, start: int, stop: int) -> Tensor:
    if t.data.ndim not in (2, 4):
        raise ShapeError(f"channel_slice needs rank 2 or 4, got {t.shape}")
    if not (0 <= start < stop <= t.shape[1]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for {t.shape[1]} channels")
    return Tensor._own(t.data[:, start:stop].copy())
