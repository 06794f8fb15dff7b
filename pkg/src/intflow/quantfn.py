"""Quantization functions: direct, constant (gradient), shift (error) and the
flag-coded 9-bit error format, plus the per-role wrappers used by the layers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .fxcore import check_finite, clip, clip_symmetric, q_direct, round_half_away


class ZeroTensorError(ValueError):
    """Power-of-two scale of an all-zero tensor (log2 0) was requested."""


class WidthIdentityError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# ---------------------------------------------------------------------------
# bit widths

WIDTH_FIELDS = (
    "k_W", "k_A", "k_BN", "k_mu", "k_sigma", "k_gamma", "k_beta",
    "k_E1", "k_E2", "k_GW", "k_Ggamma", "k_Gbeta", "k_GC",
    "k_Mom", "k_Acc", "k_lr", "k_WU", "k_gammaU", "k_betaU",
)
E2_MODES = ("plain_shift", "flag")


def width_violations(widths) -> list[str]:
    """Check the gradient and update width identities; one message per failure."""
    get = widths.get if isinstance(widths, dict) else lambda k: getattr(widths, k)
    out = []
    for name in WIDTH_FIELDS:
        if get(name) < 2:
            out.append(f"{name} = {get(name)} is below the minimum width 2")
    gc = get("k_Mom") + get("k_Acc") - 1
    if get("k_GC") != gc:
        out.append(f"k_GC = k_Mom + k_Acc - 1 violated: k_GC = {get('k_GC')}, expected {gc}")
    for name in ("k_Ggamma", "k_Gbeta"):
        if get(name) != get("k_GC"):
            out.append(f"{name} = k_GC violated: {name} = {get(name)}, k_GC = {get('k_GC')}")
    wu = get("k_GC") + get("k_lr") - 1
    for name in ("k_WU", "k_gammaU", "k_betaU"):
        if get(name) != wu:
            out.append(
                f"{name} = k_Mom + k_Acc + k_lr - 2 violated: {name} = {get(name)}, expected {wu}"
            )
    if get("k_GW") > get("k_GC"):
        out.append(f"k_GW = {get('k_GW')} exceeds k_GC = {get('k_GC')} (dr must not exceed 2^(k_GC-1))")
    return out


@dataclass(frozen=True)
class BitWidthConfig:
    """Every bit width of the training dataflow.

    The defaults are the full 8-bit configuration with flag-coded E2,
    16-bit BN statistics and (k_Mom, k_Acc, k_lr) = (3, 13, 10).
    """

    k_W: int = 8
    k_A: int = 8
    k_BN: int = 16
    k_mu: int = 16
    k_sigma: int = 16
    k_gamma: int = 8
    k_beta: int = 8
    k_E1: int = 8
    k_E2: int = 8
    k_GW: int = 8
    k_Ggamma: int = 15
    k_Gbeta: int = 15
    k_GC: int = 15
    k_Mom: int = 3
    k_Acc: int = 13
    k_lr: int = 10
    k_WU: int = 24
    k_gammaU: int = 24
    k_betaU: int = 24
    e2_mode: str = "flag"

    def __post_init__(self):
        if self.e2_mode not in E2_MODES:
            raise ValueError(f"e2_mode must be one of {E2_MODES}, got {self.e2_mode!r}")
        bad = width_violations(self)
        if bad:
            raise WidthIdentityError(bad)

    @classmethod
    def derived(cls, k_Mom: int, k_Acc: int, k_lr: int, **kw) -> "BitWidthConfig":
        """Build a config whose dependent widths follow from the optimizer widths."""
        gc = k_Mom + k_Acc - 1
        wu = gc + k_lr - 1
        return cls(
            k_Mom=k_Mom, k_Acc=k_Acc, k_lr=k_lr, k_GC=gc, k_Ggamma=gc, k_Gbeta=gc,
            k_WU=wu, k_gammaU=wu, k_betaU=wu, **kw,
        )

    @classmethod
    def uniform(cls, k: int, **kw) -> "BitWidthConfig":
        """All compute widths equal to ``k``; optimizer widths chosen to satisfy the identities."""
        base = {name: k for name in ("k_W", "k_A", "k_BN", "k_mu", "k_sigma", "k_gamma",
                                     "k_beta", "k_E1", "k_E2", "k_GW")}
        base.update(kw)
        return cls.derived(k_Mom=3, k_Acc=k, k_lr=10, **base)

    def widths(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name.startswith("k_")}

    def replace(self, **kw) -> "BitWidthConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class DrSchedule:
    """Piecewise-constant bit width of the gradient range ``dr = 2**(k-1)``."""

    breakpoints: tuple  # ((epoch_start, k), ...)

    def __post_init__(self):
        bp = tuple((int(e), int(k)) for e, k in self.breakpoints)
        if not bp or bp[0][0] != 0:
            raise ValueError("dr schedule must start at epoch 0")
        for (e0, k0), (e1, k1) in zip(bp, bp[1:]):
            if e1 <= e0:
                raise ValueError("dr schedule epochs must be strictly increasing")
            if k1 > k0:
                raise ValueError("dr schedule bit widths must be non-increasing")
        if any(k < 1 for _, k in bp):
            raise ValueError("dr bit width must be >= 1")
        object.__setattr__(self, "breakpoints", bp)

    def k_at(self, epoch: int) -> int:
        k = self.breakpoints[0][1]
        for start, kk in self.breakpoints:
            if epoch >= start:
                k = kk
        return k

    def dr_at(self, epoch: int) -> int:
        return 2 ** (self.k_at(epoch) - 1)


# ---------------------------------------------------------------------------
# primitives


def pow2_exponent(x) -> int:
    """``round(log2(max|x|))``, computed without a floating log.

    With ``max|x| = f * 2**e``, ``f`` in [0.5, 1), the rounded log is ``e`` when
    ``f >= 2**-0.5`` and ``e - 1`` otherwise.  The half-way point is irrational
    so no dyadic input ever lands on a tie.
    """
    x = check_finite(x)
    m = float(np.max(np.abs(x))) if x.size else 0.0
    if m == 0.0:
        raise ZeroTensorError("scale of an all-zero tensor is undefined")
    f, e = np.frexp(m)
    sig = int(np.ldexp(f, 53))
    return int(e) if 2 * sig * sig >= 2**106 else int(e) - 1


def R(x) -> float:
    """Power of two nearest (in the log domain) to the tensor's max magnitude."""
    return float(np.ldexp(1.0, pow2_exponent(x)))


def stochastic_round(x, rng: np.random.Generator) -> np.ndarray:
    """Round down with probability ``ceil(x) - x``, up with ``x - floor(x)``."""
    x = check_finite(x)
    lo = np.floor(x)
    frac = x - lo
    u = rng.random(x.shape)
    return lo + (u < frac)


def _is_zero(x: np.ndarray) -> bool:
    return not np.any(x)


def cq(x, k: int, k_GC: int, rng: np.random.Generator | None = None,
       rounding: str = "stochastic") -> np.ndarray:
    """Constant quantization: normalize by R, round onto ±(dr-1), divide by 2**(k_GC-1).

    ``rounding="nearest"`` replaces the stochastic step with round-half-away,
    which makes the function deterministic for reference checks.
    """
    if k > k_GC:
        raise ValueError(f"dr bit width {k} exceeds k_GC = {k_GC}")
    x = check_finite(x)
    if _is_zero(x):
        return np.zeros_like(x)
    dr = 2.0 ** (k - 1)
    t = dr * (x / R(x))
    if rounding == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        s = stochastic_round(t, rng)
    elif rounding == "nearest":
        s = round_half_away(t)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    sd = clip(s, -dr + 1, dr - 1)
    return np.ldexp(sd, -(k_GC - 1))


def sq(x, k: int) -> np.ndarray:
    """Shift quantization: ``R(x) * clip(Q(x / R(x), k), -1 + d(k), 1 - d(k))``."""
    x = check_finite(x)
    if _is_zero(x):
        return np.zeros_like(x)
    r = R(x)
    return r * clip_symmetric(q_direct(x / r, k), k)


# ---------------------------------------------------------------------------
# flag-coded errors

@dataclass(frozen=True, eq=False)
class FlagTensor:
    """Codes ``[flag][sign][k_E2-1 data bits]`` sharing a scale ``Sc = 2**scale_exp``.

    flag=1 stores ``±data * Sc``; flag=0 stores ``±data * Sc / 2**(k_E2-1)``.
    With k_E2 = 8 this is the 9-bit layout (1 flag, 1 sign, 7 data bits).
    """

    codes: np.ndarray
    scale_exp: int
    k_E2: int = 8

    def __post_init__(self):
        if self.k_E2 < 2:
            raise ValueError("k_E2 must be >= 2")
        c = np.asarray(self.codes, dtype=np.uint32)
        if c.size and int(c.max()) >= 1 << (self.k_E2 + 1):
            raise ValueError(f"flag code exceeds {self.k_E2 + 1} bits")
        c.setflags(write=False)
        object.__setattr__(self, "codes", c)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def flag(self) -> np.ndarray:
        return (self.codes >> self.k_E2) & 1

    @property
    def sign(self) -> np.ndarray:
        return (self.codes >> (self.k_E2 - 1)) & 1

    @property
    def data(self) -> np.ndarray:
        return self.codes & ((1 << (self.k_E2 - 1)) - 1)

    @property
    def scale(self) -> float:
        return float(np.ldexp(1.0, self.scale_exp))

    def __eq__(self, other):
        if not isinstance(other, FlagTensor):
            return NotImplemented
        return (self.k_E2 == other.k_E2 and self.scale_exp == other.scale_exp
                and np.array_equal(self.codes, other.codes))

    def to_bytes(self) -> bytes:
        """``int8 scale_exp`` then one little-endian u16 per element (row-major).

        Only the 9-bit (k_E2 = 8) layout has a serialized form.
        """
        if self.k_E2 != 8:
            raise ValueError("only the 9-bit flag layout is serializable")
        if not -128 <= self.scale_exp <= 127:
            raise ValueError(f"scale exponent {self.scale_exp} does not fit the int8 header")
        return struct.pack("<b", self.scale_exp) + self.codes.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, shape) -> "FlagTensor":
        (exp,) = struct.unpack_from("<b", buf, 0)
        n = int(np.prod(shape, dtype=np.int64))
        if len(buf) != 1 + 2 * n:
            raise ValueError(f"expected {1 + 2 * n} bytes for shape {tuple(shape)}, got {len(buf)}")
        codes = np.frombuffer(buf, dtype="<u2", count=n, offset=1).reshape(shape)
        return cls(codes.astype(np.uint32), exp, 8)


def flag_encode(x, k_E2: int = 8) -> FlagTensor:
    x = check_finite(x)
    if _is_zero(x):
        return FlagTensor(np.zeros(x.shape, dtype=np.uint32), 0, k_E2)
    half = 2 ** (k_E2 - 1)
    scale_exp = pow2_exponent(x) - (k_E2 - 1)
    y = np.ldexp(x, -scale_exp)  # x / Sc, exact
    big = np.abs(y) >= 1
    coarse = np.minimum(round_half_away(np.abs(y)), half - 1)
    fine = round_half_away(np.abs(y) * half)
    # fine mantissas that round up to a full Sc move to the coarse branch
    promote = ~big & (fine >= half)
    flag = big | promote
    data = np.where(big, coarse, np.where(promote, 1, fine)).astype(np.uint32)
    sign = ((y < 0) & (data > 0)).astype(np.uint32)
    codes = (flag.astype(np.uint32) << k_E2) | (sign << (k_E2 - 1)) | data
    codes = np.where(data == 0, 0, codes).astype(np.uint32)
    return FlagTensor(codes, scale_exp, k_E2)


def flag_decode(f: FlagTensor) -> np.ndarray:
    data = f.data.astype(np.float64)
    mag = np.where(f.flag == 1, data, data / 2 ** (f.k_E2 - 1))
    val = np.where(f.sign == 1, -mag, mag) + 0.0
    return np.ldexp(val, f.scale_exp)


def flag_quantize(x, k_E2: int = 8) -> np.ndarray:
    return flag_decode(flag_encode(x, k_E2))


def coverage_ratio(x, k_E2: int = 8, mode: str = "flag") -> float:
    """Fraction of elements that stay nonzero after error quantization."""
    x = check_finite(x)
    if x.size == 0:
        return 0.0
    if mode == "flag":
        q = flag_quantize(x, k_E2)
    elif mode == "plain_shift":
        q = sq(x, k_E2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.count_nonzero(q)) / x.size


# ---------------------------------------------------------------------------
# role wrappers

ROLES = ("W", "A", "BN", "E1", "E2", "G", "U")


class Quantizer:
    """Role-specific quantizers bound to one :class:`BitWidthConfig`.

    ``roles`` selects which data classes are quantized; the rest pass through
    in full precision (used for single-role sensitivity runs and the float
    baseline).  ``dr_bits`` is the current bit width of the gradient range.
    """

    def __init__(self, cfg: BitWidthConfig, roles=ROLES, dr_bits: int | None = None,
                 rounding: str = "stochastic"):
        unknown = set(roles) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown roles {sorted(unknown)}")
        self.cfg = cfg
        self.roles = frozenset(roles)
        self.dr_bits = cfg.k_GW if dr_bits is None else dr_bits
        if self.dr_bits > cfg.k_GC:
            raise ValueError(f"dr bit width {self.dr_bits} exceeds k_GC = {cfg.k_GC}")
        self.rounding = rounding

    def on(self, role: str) -> bool:
        return role in self.roles

    @property
    def any(self) -> bool:
        return bool(self.roles)

    def qw(self, x):
        if not self.on("W"):
            return np.asarray(x, dtype=np.float64)
        return clip_symmetric(q_direct(x, self.cfg.k_W), self.cfg.k_W)

    def qa(self, x):
        return q_direct(x, self.cfg.k_A) if self.on("A") else np.asarray(x, dtype=np.float64)

    def _bn(self, x, k):
        return q_direct(x, k) if self.on("BN") else np.asarray(x, dtype=np.float64)

    def qbn(self, x):
        return self._bn(x, self.cfg.k_BN)

    def qmu(self, x):
        return self._bn(x, self.cfg.k_mu)

    def qsigma(self, x):
        return self._bn(x, self.cfg.k_sigma)

    def qgamma(self, x):
        return self._bn(x, self.cfg.k_gamma)

    def qbeta(self, x):
        return self._bn(x, self.cfg.k_beta)

    def qe1(self, x):
        return sq(x, self.cfg.k_E1) if self.on("E1") else np.asarray(x, dtype=np.float64)

    def qe2(self, x):
        if not self.on("E2"):
            return np.asarray(x, dtype=np.float64)
        if self.cfg.e2_mode == "flag":
            return flag_quantize(x, self.cfg.k_E2)
        return sq(x, self.cfg.k_E2)

    def qgw(self, x, rng=None):
        if not self.on("G"):
            return np.asarray(x, dtype=np.float64)
        return cq(x, self.dr_bits, self.cfg.k_GC, rng, self.rounding)

    def qggamma(self, x):
        return q_direct(x, self.cfg.k_Ggamma) if self.on("G") else np.asarray(x, dtype=np.float64)

    def qgbeta(self, x):
        return q_direct(x, self.cfg.k_Gbeta) if self.on("G") else np.asarray(x, dtype=np.float64)

    def qacc(self, x):
        if not self.on("U"):
            return np.asarray(x, dtype=np.float64)
        return clip_symmetric(q_direct(x, self.cfg.k_Acc), self.cfg.k_Acc)
