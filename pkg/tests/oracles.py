"""Brute-force reference quantizers in exact rational arithmetic.

Nothing here imports intflow; every function works on ``Fraction`` values so
the package's float64 paths are checked against an independent evaluation.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def fr(x) -> Fraction:
    return Fraction(float(x))


def round_half_away(f: Fraction) -> int:
    a = abs(f)
    n = math.floor(a + Fraction(1, 2))
    return n if f >= 0 else -n


def q_direct(f: Fraction, k: int) -> Fraction:
    s = 2 ** (k - 1)
    return Fraction(round_half_away(f * s), s)


def clip(f: Fraction, lo: Fraction, hi: Fraction) -> Fraction:
    return min(max(f, lo), hi)


def log2_round(m: Fraction) -> int:
    """Integer n minimizing |log2(m) - n|, found by scanning powers of two."""
    n = m.numerator.bit_length() - m.denominator.bit_length()
    while Fraction(2) ** n > m:
        n -= 1
    while Fraction(2) ** (n + 1) <= m:
        n += 1
    # m in [2^n, 2^(n+1)); the log midpoint is 2^(n+1/2), i.e. m^2 vs 2^(2n+1)
    return n + 1 if m * m >= Fraction(2) ** (2 * n + 1) else n


def R(values) -> Fraction:
    return Fraction(2) ** log2_round(max(abs(v) for v in values))


def sq(values, k: int) -> list[Fraction]:
    if all(v == 0 for v in values):
        return [Fraction(0)] * len(values)
    r = R(values)
    b = 1 - Fraction(1, 2 ** (k - 1))
    return [r * clip(q_direct(v / r, k), -b, b) for v in values]


def cq_nearest(values, k: int, k_gc: int) -> list[Fraction]:
    if all(v == 0 for v in values):
        return [Fraction(0)] * len(values)
    r = R(values)
    dr = 2 ** (k - 1)
    return [Fraction(clip(Fraction(round_half_away(dr * v / r)), Fraction(-dr + 1),
                          Fraction(dr - 1)), 2 ** (k_gc - 1)) for v in values]


def flag_value(code: int, scale: Fraction, k_e2: int = 8) -> Fraction:
    flag = (code >> k_e2) & 1
    sign = (code >> (k_e2 - 1)) & 1
    data = code & ((1 << (k_e2 - 1)) - 1)
    mag = data * scale if flag else data * scale / 2 ** (k_e2 - 1)
    return -mag if sign else mag


def flag_representable(scale: Fraction, k_e2: int = 8) -> set[Fraction]:
    """Zero, ±i·Sc and ±i·Sc/2^(k_e2-1) for i = 1 .. 2^(k_e2-1)-1."""
    top = 2 ** (k_e2 - 1)
    out = {Fraction(0)}
    for i in range(1, top):
        for v in (i * scale, i * scale / top):
            out.add(v)
            out.add(-v)
    return out


def flag_quantize(values, k_e2: int = 8) -> list[Fraction]:
    """Piecewise rule: coarse rounding clipped to ±(2^(k_e2-1)-1)·Sc above Sc, fine grid below."""
    if all(v == 0 for v in values):
        return [Fraction(0)] * len(values)
    top = 2 ** (k_e2 - 1)
    sc = R(values) / top
    out = []
    for v in values:
        y = v / sc
        if abs(y) >= 1:
            out.append(sc * clip(Fraction(round_half_away(y)), Fraction(-top + 1), Fraction(top - 1)))
        else:
            out.append(sc * q_direct(y, k_e2))
    return out


def as_fractions(x: np.ndarray) -> list[Fraction]:
    return [fr(v) for v in np.ravel(x)]
