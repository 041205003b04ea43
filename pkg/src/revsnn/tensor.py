"""Dense float64 tensors with deterministic, countable arithmetic.

Every elementwise operation maps one-to-one onto scalar IEEE-754 operations
and matrix products accumulate along a fixed ascending inner index, so any
fixed configuration reproduces bit-identical results run to run.  When a
scalar-op sink is installed (see ledgers) each operation reports the number
of scalar operations it performed; with no sink installed the hook is a
single attribute lookup.

All tensors are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import threading

import numpy as np

# 64-bit unsigned seed; the generator is numpy's PCG64, so a fixed seed gives
# a bit-identical stream within one release of this package.
Seed = int


class ShapeMismatch(ValueError):
    pass


class DivisionByZero(ArithmeticError):
    def __init__(self, index: int):
        super().__init__(f"division by zero at element index {index}")
        self.index = index


class NotDivisible(ValueError):
    pass


class BadRange(ValueError):
    pass


_tls = threading.local()


def set_flop_sink(sink):
    """Install a per-thread callable that receives scalar-op counts.

    Returns the previously installed sink (or None).  Passing None disables
    counting for this thread.
    """
    old = getattr(_tls, "sink", None)
    _tls.sink = sink
    return old


def _count(n: int) -> None:
    sink = getattr(_tls, "sink", None)
    if sink is not None:
        sink(n)


class Tensor:
    """Immutable row-major array of float64 values."""

    __slots__ = ("_arr",)

    def __init__(self, values, shape=None):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if any(d < 0 for d in arr.shape):
            raise ShapeMismatch(f"negative extent in shape {arr.shape}")
        arr.setflags(write=False)
        self._arr = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Private: adopt an array we own without copying.
        t = object.__new__(cls)
        arr.setflags(write=False)
        t._arr = arr
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=np.float64))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls._wrap(np.full(tuple(shape), float(value), dtype=np.float64))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return cls.full(shape, 1.0)

    @property
    def shape(self) -> tuple:
        return self._arr.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._arr

    @property
    def size(self) -> int:
        return self._arr.size

    def item(self) -> float:
        return float(self._arr.reshape(-1)[0]) if self._arr.size == 1 else self._arr.item()

    def tolist(self):
        return self._arr.tolist()

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)})"

    # Arithmetic sugar; all routed through the counted module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _operand(x):
    if isinstance(x, Tensor):
        return x._arr, False
    return float(x), True


def _binary(a, b, np_op, name):
    arr_a, a_scalar = _operand(a)
    arr_b, b_scalar = _operand(b)
    if a_scalar and b_scalar:
        raise TypeError(f"{name} needs at least one tensor operand")
    if not a_scalar and not b_scalar and arr_a.shape != arr_b.shape:
        raise ShapeMismatch(f"{name}: shapes {arr_a.shape} and {arr_b.shape} differ")
    out = np_op(arr_a, arr_b)
    _count(out.size)
    return Tensor._wrap(out)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, "mul")


def div(a, b) -> Tensor:
    if isinstance(b, Tensor):
        zeros = np.flatnonzero(b._arr == 0.0)
        if zeros.size:
            raise DivisionByZero(int(zeros[0]))
    elif float(b) == 0.0:
        raise DivisionByZero(0)
    return _binary(a, b, np.divide, "div")


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a constant (one scalar op per element)."""
    return mul(t, c)


def affine(t: Tensor, a: float, b: float) -> Tensor:
    """a * t + b, counted as two scalar ops per element."""
    out = t._arr * float(a) + float(b)
    _count(2 * out.size)
    return Tensor._wrap(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product accumulated in ascending inner-index order.

    The accumulation order matches a naive triple loop exactly, which keeps
    results bit-reproducible independent of any BLAS backend.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul needs tensor operands")
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeMismatch(f"matmul: inner extents {k} and {k2} differ")
    aa, bb = a._arr, b._arr
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(k):
        out += aa[:, i : i + 1] * bb[i, :]
    _count(2 * m * k * n)
    return Tensor._wrap(out)


def transpose2d(t: Tensor) -> Tensor:
    if len(t.shape) != 2:
        raise ShapeMismatch(f"transpose2d needs rank 2, got {t.shape}")
    return Tensor._wrap(t._arr.T)


def add_rowwise(a: Tensor, row: Tensor) -> Tensor:
    """Add a rank-1 tensor to every row of a rank-2 tensor (one op/element)."""
    if len(a.shape) != 2 or len(row.shape) != 1 or a.shape[1] != row.shape[0]:
        raise ShapeMismatch(f"add_rowwise: shapes {a.shape} and {row.shape}")
    out = a._arr + row._arr
    _count(out.size)
    return Tensor._wrap(out)


def split_last(t: Tensor, groups: int) -> list:
    """Split into `groups` equal slices of the last axis; first slice holds
    the leading columns.  Inverse of concat_last."""
    if groups < 1:
        raise NotDivisible(f"group count must be positive, got {groups}")
    last = t.shape[-1]
    if last % groups != 0:
        raise NotDivisible(f"last extent {last} not divisible by {groups}")
    width = last // groups
    return [Tensor._wrap(t._arr[..., j * width : (j + 1) * width]) for j in range(groups)]


def concat_last(parts) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_last needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(f"concat_last: leading extents {p.shape[:-1]} != {lead}")
    return Tensor._wrap(np.concatenate([p._arr for p in parts], axis=-1))


def heaviside(t: Tensor, threshold: float) -> Tensor:
    """1.0 where value - threshold >= 0, else 0.0 (threshold itself fires)."""
    out = (t._arr >= float(threshold)).astype(np.float64)
    _count(out.size)
    return Tensor._wrap(out)


def arctan(t: Tensor) -> Tensor:
    out = np.arctan(t._arr)
    _count(out.size)
    return Tensor._wrap(out)


def approx_equal(a: Tensor, b: Tensor, rtol: float, atol: float) -> bool:
    """True iff |a_i - b_i| <= atol + rtol * |b_i| for every element."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"approx_equal: shapes {a.shape} and {b.shape} differ")
    return bool(np.all(np.abs(a._arr - b._arr) <= atol + rtol * np.abs(b._arr)))


def max_abs_error(a: Tensor, b: Tensor) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"max_abs_error: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a._arr - b._arr)))


def bit_equal(a: Tensor, b: Tensor) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a._arr, b._arr))


def random_uniform(shape, lo: float, hi: float, seed: Seed) -> Tensor:
    """Deterministic uniform draw in [lo, hi) from a PCG64 stream."""
    if not lo < hi:
        raise BadRange(f"need lo < hi, got [{lo}, {hi})")
    rng = np.random.default_rng(seed)
    return Tensor._wrap(rng.uniform(lo, hi, size=tuple(shape)))
