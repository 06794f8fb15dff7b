"""Integer-only training of quantized networks with fixed-point W, A, G, E, U and BN."""
from .fxcore import FixedScalar, QTensor, d, from_fixed, q_direct, to_fixed
from .quantfn import (
    BitWidthConfig,
    DrSchedule,
    FlagTensor,
    Quantizer,
    R,
    coverage_ratio,
    cq,
    flag_decode,
    flag_encode,
    sq,
    stochastic_round,
)

__all__ = [
    "BitWidthConfig", "DrSchedule", "FixedScalar", "FlagTensor", "QTensor", "Quantizer", "R",
    "coverage_ratio", "cq", "d", "flag_decode", "flag_encode", "from_fixed", "q_direct", "sq",
    "stochastic_round", "to_fixed",
]
__version__ = "0.1.0"
