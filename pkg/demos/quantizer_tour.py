"""A walk through the quantizers on a toy error tensor.

Run with ``python3 demos/quantizer_tour.py``.
"""
import numpy as np

from intflow.fxcore import q_direct
from intflow.quantfn import R, coverage_ratio, cq, flag_encode, flag_decode, sq

rng = np.random.default_rng(0)

# direct quantization snaps onto the 2^-(k-1) grid, ties away from zero
x = np.array([0.3, -0.3, 0.5 / 128, -1.5 / 128])
print("q_direct 8-bit:", q_direct(x, 8) * 128, "(in units of 2^-7)")

# backward errors are tiny and heavy tailed
e = rng.choice([-1.0, 1.0], 2000) * np.exp(rng.normal(-9, 2.5, 2000))
print(f"max|e| = {np.abs(e).max():.3g}, R(e) = {R(e)!r}")

# shift quantization keeps 8 bits below R; small values vanish
e_sq = sq(e, 8)
print(f"sq 8-bit keeps {np.count_nonzero(e_sq)} of {e.size} nonzero")

# the flag format adds a finer grid under Sc = R/128
f = flag_encode(e, 8)
print(f"flag scale 2^{f.scale_exp}, {int(f.flag.sum())} coarse codes")
print(f"flag keeps {np.count_nonzero(flag_decode(f))} of {e.size} nonzero")
print(f"coverage: flag {coverage_ratio(e, 8, 'flag'):.3f}, plain {coverage_ratio(e, 8, 'plain_shift'):.3f}")

# 9 bits per element on the wire plus a one-byte scale header
print("serialized bytes:", len(f.to_bytes()))

# constant quantization maps weight gradients onto a fixed 2^-14 grid,
# whatever their scale; the learning rate absorbs the factor R / 2^(k_GC-1) * dr.
# Unbiased except for elements above R, which saturate
g = rng.normal(0, 1e-3, 5)
draws = np.stack([cq(g, 8, 15, rng) for _ in range(20000)])
back = draws.mean(axis=0) * 2**14 / 128 * R(g)
print("g                 ", g)
print("E[cq(g)] rescaled ", back)
