"""Why the 24-bit network gradient check misses 1e-3 with the error quantizers on.

sq divides by R = 2^round(log2 max|e|).  When max|e| sits above R (up to
sqrt(2) R) the clip to 1 - 2^-(k-1) shrinks the largest errors, which is a
bias no amount of bits removes.
"""
import numpy as np

from intflow.quantfn import R, sq

rng = np.random.default_rng(1)
for scale in (1.0, 1.3, 1.41):
    e = rng.normal(size=64)
    e *= scale / np.abs(e).max()  # max|e| = scale, R = 1
    err = np.abs(sq(e, 24) - e).max() / np.abs(e).max()
    print(f"max|e| = {scale:.2f}  R = {R(e)}  worst relative error at 24 bits: {err:.3g}")

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from gradcheck import gradient_check  # noqa: E402

for roles, label in ((("W", "A", "BN", "G", "U"), "forward path"), (None, "all roles")):
    kw = {} if roles is None else {"roles": roles}
    errs = [gradient_check(s, **kw)[0] for s in range(5)]
    print(f"{label:13s} max rel err over 5 seeds: {max(errs):.3g}")
