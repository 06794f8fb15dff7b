"""Dyadic fixed-point values and exact kernels.

A value is stored as an integer mantissa ``m`` and a power-of-two resolution
``2**e``.  Real-valued tensors are plain float64 ndarrays; every value that
leaves a quantizer is dyadic and exactly representable in a double, so the
float carrier never hides a rounding step.

Products of two grids are exact in float64 as long as the integer sums stay
below 2**53.  The kernels below check that bound and fall back to int64
mantissa arithmetic when it could be exceeded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

STORE_DTYPE = np.int32
ACC_DTYPE = np.int64
_EXACT_FLOAT_LIMIT = 2.0**53


class RepresentationError(ValueError):
    """A value is not on the requested grid or exceeds the width's range."""


class ShapeError(ValueError):
    pass


def d(k: int) -> float:
    """Grid spacing of a ``k``-bit fixed-point number: ``2**-(k-1)``."""
    if k < 1:
        raise ValueError(f"bit width must be >= 1, got {k}")
    return 2.0 ** -(k - 1)


def max_mantissa(k: int) -> int:
    return 2 ** (k - 1) - 1


def check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in input tensor")
    return x


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero.

    ``floor(|x| + 0.5)`` is wrong for 0.49999999999999994 (the add rounds up),
    so the fractional part is compared instead; ``|x| - floor(|x|)`` is exact.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, x) + 0.0  # + 0.0 folds -0.0 into 0.0


def q_direct(x, k: int) -> np.ndarray:
    """Round onto the ``2**-(k-1)`` grid.  No range clipping."""
    if k < 2:
        raise ValueError(f"bit width must be >= 2, got {k}")
    x = check_finite(x)
    scale = 2.0 ** (k - 1)
    return round_half_away(x * scale) / scale


def clip(x, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"clip bounds inverted: lo={lo} > hi={hi}")
    return np.clip(np.asarray(x, dtype=np.float64), lo, hi)


def clip_symmetric(x, k: int) -> np.ndarray:
    """Saturate to ``±(1 - d(k))``, the symmetric k-bit range."""
    bound = 1.0 - d(k)
    return clip(x, -bound, bound)


@dataclass(frozen=True, eq=False)
class FixedScalar:
    mantissa: int
    resolution_exp: int

    @property
    def value(self) -> Fraction:
        if self.resolution_exp >= 0:
            return Fraction(self.mantissa * 2**self.resolution_exp)
        return Fraction(self.mantissa, 2**-self.resolution_exp)

    def __float__(self) -> float:
        return float(self.value)

    def __eq__(self, other):
        if isinstance(other, FixedScalar):
            return self.value == other.value
        return NotImplemented

    def __hash__(self):
        return hash(self.value)

    def __repr__(self):
        return f"FixedScalar({self.mantissa}*2^{self.resolution_exp})"

    def bits(self) -> int:
        """Smallest k whose symmetric range holds the mantissa."""
        return max(abs(self.mantissa).bit_length() + 1, 2)

    def normalized(self) -> "FixedScalar":
        m, e = self.mantissa, self.resolution_exp
        if m == 0:
            return FixedScalar(0, 0)
        while m % 2 == 0:
            m //= 2
            e += 1
        return FixedScalar(m, e)

    def with_exp(self, exp: int) -> "FixedScalar":
        """Re-express on a finer (or equal) grid; raises if that would round."""
        shift = self.resolution_exp - exp
        if shift >= 0:
            return FixedScalar(self.mantissa * 2**shift, exp)
        step = 2**-shift
        if self.mantissa % step:
            raise RepresentationError(f"{self!r} is not on the 2^{exp} grid")
        return FixedScalar(self.mantissa // step, exp)

    @classmethod
    def from_float(cls, x: float, exp: int) -> "FixedScalar":
        m = Fraction(x) / Fraction(2) ** exp
        if m.denominator != 1:
            raise RepresentationError(f"{x!r} is not on the 2^{exp} grid")
        return cls(int(m), exp)


@dataclass(frozen=True, eq=False)
class QTensor:
    """Integer mantissas on a ``2**resolution_exp`` grid with a declared width.

    Invariant: every ``|m| <= 2**(bit_width-1) - 1``.
    """

    mantissas: np.ndarray
    resolution_exp: int
    bit_width: int
    shape: tuple = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.mantissas)
        if not np.issubdtype(m.dtype, np.integer):
            raise TypeError("mantissas must be integers")
        if self.bit_width < 2:
            raise ValueError("bit width must be >= 2")
        lim = max_mantissa(self.bit_width)
        if m.size and int(np.abs(m.astype(ACC_DTYPE)).max()) > lim:
            idx = _index(int(np.argmax(np.abs(m))), m.shape)
            raise RepresentationError(
                f"mantissa {int(m[idx])} at index {idx} exceeds the {self.bit_width}-bit range ±{lim}"
            )
        dtype = STORE_DTYPE if self.bit_width <= 32 else ACC_DTYPE
        m = m.astype(dtype)
        m.setflags(write=False)
        object.__setattr__(self, "mantissas", m)
        object.__setattr__(self, "shape", m.shape)

    @property
    def values(self) -> np.ndarray:
        return np.ldexp(self.mantissas.astype(np.float64), self.resolution_exp)

    @property
    def size(self) -> int:
        return self.mantissas.size

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.bit_width == other.bit_width
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"QTensor(shape={self.shape}, exp={self.resolution_exp}, k={self.bit_width})"


def _index(flat: int, shape: tuple) -> tuple:
    return tuple(int(i) for i in np.unravel_index(flat, shape)) if shape else ()


def to_fixed(x, k: int, resolution_exp: int | None = None) -> QTensor:
    """Store an on-grid real tensor as a ``k``-bit QTensor without rounding.

    The default grid is ``2**-(k-1)``.  Off-grid or out-of-range values raise
    :class:`RepresentationError` naming the first offending index.
    """
    x = check_finite(x)
    if resolution_exp is None:
        resolution_exp = -(k - 1)
    scaled = np.ldexp(x, -resolution_exp)
    m = np.rint(scaled)
    bad = np.flatnonzero(m != scaled)
    if bad.size:
        idx = _index(bad[0], x.shape)
        raise RepresentationError(
            f"value {float(x[idx])!r} at index {idx} is not on the 2^{resolution_exp} grid"
        )
    lim = max_mantissa(k)
    over = np.flatnonzero(np.abs(m) > lim)
    if over.size:
        idx = _index(over[0], x.shape)
        raise RepresentationError(
            f"value {float(x[idx])!r} at index {idx} is outside the {k}-bit range"
        )
    return QTensor(m.astype(ACC_DTYPE), resolution_exp, k)


def from_fixed(q: QTensor) -> np.ndarray:
    return q.values


def is_on_grid(x, resolution_exp: int) -> bool:
    x = np.asarray(x, dtype=np.float64)
    s = np.ldexp(x, -resolution_exp)
    return bool(np.all(s == np.rint(s)))


# ---------------------------------------------------------------------------
# exact kernels


def _require_exact(a_max: float, b_max: float, terms: int) -> bool:
    return a_max * b_max * max(terms, 1) < _EXACT_FLOAT_LIMIT


def _mantissa_matmul(a: QTensor, b: QTensor) -> np.ndarray:
    am = a.mantissas.astype(np.float64)
    bm = b.mantissas.astype(np.float64)
    amax = float(np.abs(am).max(initial=0))
    bmax = float(np.abs(bm).max(initial=0))
    if _require_exact(amax, bmax, a.shape[-1]):
        prod = am @ bm
    else:
        prod = (a.mantissas.astype(ACC_DTYPE) @ b.mantissas.astype(ACC_DTYPE)).astype(np.float64)
    return np.ldexp(prod, a.resolution_exp + b.resolution_exp)


def matmul(a: QTensor, b: QTensor) -> np.ndarray:
    if a.mantissas.ndim != 2 or b.mantissas.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return _mantissa_matmul(a, b)


def hadamard(a: QTensor, b: QTensor) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes {a.shape} and {b.shape} differ")
    prod = a.mantissas.astype(ACC_DTYPE) * b.mantissas.astype(ACC_DTYPE)
    return np.ldexp(prod.astype(np.float64), a.resolution_exp + b.resolution_exp)


def add(a: QTensor, b: QTensor) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} and {b.shape} differ")
    e = min(a.resolution_exp, b.resolution_exp)
    am = a.mantissas.astype(ACC_DTYPE) << (a.resolution_exp - e)
    bm = b.mantissas.astype(ACC_DTYPE) << (b.resolution_exp - e)
    return np.ldexp((am + bm).astype(np.float64), e)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw) patch matrix, zero padded."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: QTensor, w: QTensor, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Exact 2-D cross-correlation; x is (N, C, H, W), w is (O, C, kh, kw)."""
    if x.mantissas.ndim != 4 or w.mantissas.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} do not conform")
    n, _, h, wd = x.shape
    o, c, kh, kw = w.shape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    cols = im2col(x.mantissas.astype(ACC_DTYPE), kh, kw, stride, pad)
    colq = QTensor(cols, x.resolution_exp, max(x.bit_width, 2))
    wq = QTensor(w.mantissas.reshape(o, c * kh * kw).T, w.resolution_exp, w.bit_width)
    y = _mantissa_matmul(colq, wq)
    return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
