"""Fixed-point momentum optimizer and the exact weight update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fxcore import FixedScalar, clip_symmetric, is_on_grid, max_mantissa, q_direct
from .quantfn import BitWidthConfig, width_violations


class UpdateConsistencyError(RuntimeError):
    """An update left the storage grid, meaning a width identity is broken upstream."""


@dataclass(frozen=True)
class FixedHyper:
    mom: FixedScalar
    lr: FixedScalar

    def __post_init__(self):
        if not 0 <= self.mom.value < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {float(self.mom)}")
        if self.lr.value <= 0:
            raise ValueError(f"learning rate must be positive, got {float(self.lr)}")

    def check(self, cfg: BitWidthConfig) -> None:
        """Both constants must sit on their k-bit grids and within range."""
        for name, val, k in (("momentum", self.mom, cfg.k_Mom), ("lr", self.lr, cfg.k_lr)):
            try:
                m = val.with_exp(-(k - 1)).mantissa
            except ValueError as exc:
                raise ValueError(f"{name} {val!r} is off the {k}-bit grid") from exc
            if abs(m) > max_mantissa(k):
                raise ValueError(f"{name} {val!r} exceeds the {k}-bit range")

    def with_lr(self, lr: FixedScalar) -> "FixedHyper":
        return FixedHyper(self.mom, lr)


DEFAULT_HYPER = FixedHyper(mom=FixedScalar(3, -2), lr=FixedScalar(26, -9))


def validate_widths(cfg) -> list[str]:
    """Empty list when the gradient/update width identities hold."""
    widths = cfg.widths() if isinstance(cfg, BitWidthConfig) else dict(cfg)
    return width_violations(widths)


@dataclass
class OptimizerState:
    acc: dict = field(default_factory=dict)  # parameter name -> accumulated value
    step: int = 0
    saturation: int = 0  # elements clipped by the accumulator range so far


def momentum_step(acc_prev: np.ndarray, g_q: np.ndarray, mom: float,
                  k_Acc: int | None = None):
    """``Acc_i = Mom * Acc_(i-1)q + g_iq``; returns (Acc_i, Acc_iq, saturated count).

    With ``k_Acc=None`` the accumulator is kept in full precision.
    """
    acc = mom * acc_prev + g_q
    if k_Acc is None:
        return acc, acc, 0
    rounded = q_direct(acc, k_Acc)
    acc_q = clip_symmetric(rounded, k_Acc)
    return acc, acc_q, int(np.count_nonzero(acc_q != rounded))


def apply_update(w: np.ndarray, acc: np.ndarray, lr: float, k_WU: int | None = None):
    """``W - lr * Acc`` saturated to the storage range; never rounds.

    Raises :class:`UpdateConsistencyError` if the step is off the k_WU grid.
    ``k_WU=None`` performs a plain full-precision step.
    """
    delta = lr * acc
    if k_WU is None:
        return w - delta
    exp = -(k_WU - 1)
    if not is_on_grid(delta, exp):
        raise UpdateConsistencyError(f"update is not on the 2^{exp} grid")
    new = w - delta
    if not is_on_grid(new, exp):
        raise UpdateConsistencyError("updated weights left the storage grid")
    return clip_symmetric(new, k_WU)


class MomentumOptimizer:
    """Runs the quantized momentum step and update for every named parameter."""

    def __init__(self, cfg: BitWidthConfig, hyper: FixedHyper = DEFAULT_HYPER,
                 state: OptimizerState | None = None):
        self.cfg = cfg
        self.hyper = hyper
        self.state = state or OptimizerState()

    def step_param(self, name: str, value: np.ndarray, g_q: np.ndarray,
                   quantized: bool, k_store: int) -> np.ndarray:
        prev = self.state.acc.get(name)
        if prev is None:
            prev = np.zeros_like(value)
        mom, lr = float(self.hyper.mom), float(self.hyper.lr)
        if quantized:
            acc, acc_q, sat = momentum_step(prev, g_q, mom, self.cfg.k_Acc)
            self.state.saturation += sat
            new = apply_update(value, acc, lr, k_store)
        else:
            acc, acc_q, _ = momentum_step(prev, g_q, mom, None)
            new = apply_update(value, acc, lr, None)
        self.state.acc[name] = acc_q
        return new
