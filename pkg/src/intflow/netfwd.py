"""Quantized forward pass of one layer: conv/dense, quantized BN, activation."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .fxcore import ShapeError, conv_out_size, im2col, is_on_grid
from .quantfn import BitWidthConfig, Quantizer

EPS_EXP = -10
EPS_Q = 2.0**EPS_EXP  # added to the quantized std before dividing


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv2d"
    fan_in: int  # in features (dense) or in channels (conv)
    fan_out: int  # out features or out channels
    kernel: int = 1
    stride: int = 1
    pad: int | None = None  # None: same-padding for odd kernels
    has_bn: bool = True
    relu: bool = True
    quantized: bool = True

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("layer fan-in and fan-out must be >= 1")
        if self.kind == "conv2d" and (self.kernel < 1 or self.stride < 1):
            raise ValueError("conv kernel and stride must be >= 1")
        if self.pad is None:
            object.__setattr__(self, "pad", self.kernel // 2 if self.kind == "conv2d" else 0)

    @property
    def n_in(self) -> int:
        """Fan-in seen by one output unit (the initializer's n_in)."""
        return self.fan_in * self.kernel * self.kernel if self.kind == "conv2d" else self.fan_in

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.fan_out, self.fan_in)
        return (self.fan_out, self.fan_in, self.kernel, self.kernel)

    def output_shape(self, in_shape: tuple) -> tuple:
        if self.kind == "dense":
            if len(in_shape) != 1 or in_shape[0] != self.fan_in:
                raise ShapeError(f"dense layer expects ({self.fan_in},), got {in_shape}")
            return (self.fan_out,)
        if len(in_shape) != 3 or in_shape[0] != self.fan_in:
            raise ShapeError(f"conv layer expects ({self.fan_in}, H, W), got {in_shape}")
        _, h, w = in_shape
        oh = conv_out_size(h, self.kernel, self.stride, self.pad)
        ow = conv_out_size(w, self.kernel, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv geometry gives empty output for input {in_shape}")
        return (self.fan_out, oh, ow)


@dataclass
class LayerState:
    """Stored parameters of one layer plus the cache its backward pass reads.

    For quantized layers ``W``, ``gamma`` and ``beta`` hold values on the
    k_WU / k_gammaU / k_betaU storage grids.
    """

    spec: LayerSpec
    W: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)


FULL_PRECISION = Quantizer(BitWidthConfig(), roles=())


def effective_quantizer(spec: LayerSpec, q: Quantizer) -> Quantizer:
    return q if spec.quantized else FULL_PRECISION


def _stat_axes(x: np.ndarray) -> tuple:
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bcast(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v if x.ndim == 2 else v[None, :, None, None]


def _int_div(a: int, b: int) -> float:
    return float(Fraction(a, b))


def batch_stats(x1: np.ndarray, resolution_exp: int | None = None):
    """Per-feature (dense) or per-channel (conv) mean and population std.

    When ``x1`` lies on a known ``2**resolution_exp`` grid the sums run over
    integer mantissas and only the final square root is taken in floating point.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    axes = _stat_axes(x1)
    count = int(np.prod([x1.shape[a] for a in axes]))
    if x1.shape[0] < 2:
        raise ValueError("batch statistics need a batch of at least 2")
    if resolution_exp is None or not is_on_grid(x1, resolution_exp):
        return x1.mean(axis=axes), x1.std(axis=axes)
    m = np.rint(np.ldexp(x1, -resolution_exp))
    peak = float(np.abs(m).max(initial=0.0))
    if peak * peak * count < 2.0**62:
        m = m.astype(np.int64)
    else:
        # wide grids: squares would overflow int64, so sum Python ints
        m = np.array([int(v) for v in m.ravel()], dtype=object).reshape(m.shape)
    s1 = m.sum(axis=axes)
    s2 = (m * m).sum(axis=axes)
    mu = np.array([math.ldexp(_int_div(int(a), count), resolution_exp) for a in s1.ravel()])
    sigma = np.empty(s1.shape)
    for i, (a, b) in enumerate(zip(s1.tolist(), s2.tolist())):
        num = count * b - a * a  # exact, count**2 * variance in mantissa units
        sigma[i] = math.ldexp(math.sqrt(num) / count, resolution_exp)
    return mu, sigma


def _linear(spec: LayerSpec, x0: np.ndarray, wq: np.ndarray, cache: dict | None):
    if spec.kind == "dense":
        return x0 @ wq.T
    n = x0.shape[0]
    _, oh, ow = spec.output_shape(x0.shape[1:])
    cols = im2col(x0, spec.kernel, spec.kernel, spec.stride, spec.pad)
    if cache is not None:
        cache["cols"] = cols
    y = cols @ wq.reshape(spec.fan_out, -1).T
    return y.reshape(n, oh, ow, spec.fan_out).transpose(0, 3, 1, 2)


def _product_exp(q: Quantizer) -> int | None:
    if q.on("W") and q.on("A"):
        return -(q.cfg.k_W - 1) - (q.cfg.k_A - 1)
    return None


def forward_layer(state: LayerState, x_in: np.ndarray, q: Quantizer,
                  train: bool = True) -> np.ndarray:
    """Conv/dense -> Normalization & Q_BN -> Scale & Offset -> Activation & Q_A.

    ``train=False`` skips the backward cache; BN always uses the statistics
    of the batch being processed.
    """
    spec = state.spec
    q = effective_quantizer(spec, q)
    x0 = np.asarray(x_in, dtype=np.float64)
    if spec.kind == "dense" and x0.ndim > 2:
        x0 = x0.reshape(x0.shape[0], -1)
    spec.output_shape(x0.shape[1:])
    cache = {} if train else None

    wq = q.qw(state.W)
    x1 = _linear(spec, x0, wq, cache)
    if spec.has_bn:
        mu, sigma = batch_stats(x1, _product_exp(q))
        mu_q, sigma_q = q.qmu(mu), q.qsigma(sigma)
        denom = sigma_q + EPS_Q
        x2_pre = (x1 - _bcast(mu_q, x1)) / _bcast(denom, x1)
        x2 = q.qbn(x2_pre)
        gamma_q, beta_q = q.qgamma(state.gamma), q.qbeta(state.beta)
        x3 = _bcast(gamma_q, x2) * x2 + _bcast(beta_q, x2)
    else:
        mu = sigma = mu_q = sigma_q = denom = gamma_q = beta_q = None
        x2_pre = x2 = x3 = x1
    if spec.relu:
        mask = x3 > 0
        a_pre = np.where(mask, x3, 0.0)
        x4 = q.qa(a_pre)
    else:
        mask = None
        a_pre = x4 = x3
    if train:
        cache.update(in_shape=np.shape(x_in), x0=x0, wq=wq, x1=x1, x2_pre=x2_pre, x2=x2,
                     a_pre=a_pre, x4=x4, mu=mu, sigma=sigma, mu_q=mu_q, sigma_q=sigma_q,
                     denom=denom, gamma_q=gamma_q, beta_q=beta_q, mask=mask)
        state.cache = cache
    return x4

