"""Quantized backward pass of one layer and the full-precision loss head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fxcore import col2im
from .netfwd import LayerState, _bcast, _stat_axes, effective_quantizer
from .quantfn import FlagTensor, Quantizer, flag_decode, flag_encode

STAGES = ("e0", "e1", "e2", "e3", "e4")
BN_BACKWARD_MODES = ("frozen", "full")


class ContractError(RuntimeError):
    pass


@dataclass
class ErrorTensor:
    values: np.ndarray
    stage: str = "e4"
    flag: FlagTensor | None = None  # coded payload of a flag-mode e3

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown error stage {self.stage!r}")


@dataclass
class GradientSet:
    g_W: np.ndarray
    g_Wq: np.ndarray
    g_gamma: np.ndarray | None = None
    g_gammaq: np.ndarray | None = None
    g_beta: np.ndarray | None = None
    g_betaq: np.ndarray | None = None


def ste_gradient_of_quantizer(upstream: np.ndarray) -> np.ndarray:
    """Straight-through estimator: a quantizer's backward is the identity."""
    return upstream


def loss_and_error(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be integers in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def _bn_full_backward(e2, c) -> np.ndarray:
    # x2 = (x1 - mu) / (sigma + eps) with mu, sigma depending on the batch
    axes = _stat_axes(e2)
    count = int(np.prod([e2.shape[a] for a in axes]))
    s = _bcast(c["denom"], e2)
    xc = c["x1"] - _bcast(c["mu"], e2)
    sigma = c["sigma"]
    safe = np.where(sigma > 0, sigma, 1.0)
    dot = (e2 * xc).sum(axis=axes)
    coef = np.where(sigma > 0, dot / (count * safe), 0.0)
    return (e2 - e2.mean(axis=axes, keepdims=True)) / s - xc * _bcast(coef, e2) / s**2


def backward_layer(state: LayerState, e_in, q: Quantizer,
                   rng: np.random.Generator | None = None,
                   bn_backward: str = "full", need_input_error: bool = True):
    """Propagate ``e4`` of the layer above through this layer.

    Returns ``(e_out, grads)`` where ``e_out`` is this layer's e4 at full
    intermediate precision (the layer below requantizes it on entry) or None
    when ``need_input_error`` is false.
    """
    if isinstance(e_in, ErrorTensor):
        if e_in.stage != "e4":
            raise ContractError(f"backward_layer consumes e4, got {e_in.stage}")
        e_in = e_in.values
    c = state.cache
    if not c:
        raise ContractError("backward_layer called without a forward cache")
    if bn_backward not in BN_BACKWARD_MODES:
        raise ValueError(f"bn_backward must be one of {BN_BACKWARD_MODES}")
    spec = state.spec
    q = effective_quantizer(spec, q)
    e_in = np.asarray(e_in, dtype=np.float64).reshape(c["x1"].shape)

    e0 = q.qe1(e_in)
    e1 = e0 * c["mask"] if spec.relu else e0
    flag = None
    if spec.has_bn:
        e2 = e1 * _bcast(c["gamma_q"], e1)
        if bn_backward == "frozen":
            pre = e2 / _bcast(c["denom"], e2)
        else:
            pre = _bn_full_backward(e2, c)
    else:
        e2 = pre = e1
    if q.on("E2") and q.cfg.e2_mode == "flag":
        flag = flag_encode(pre, q.cfg.k_E2)
        e3 = flag_decode(flag)
    else:
        e3 = q.qe2(pre)
    c["errors"] = {"e0_pre": e_in, "e0": e0, "e1": e1, "e2": e2, "e3_pre": pre, "e3": e3,
                   "e3_flag": flag}

    wq = c["wq"]
    if spec.kind == "dense":
        g_W = e3.T @ c["x0"]
        e4 = e3 @ wq if need_input_error else None
    else:
        o = spec.fan_out
        e3c = e3.transpose(0, 2, 3, 1).reshape(-1, o)
        g_W = (e3c.T @ c["cols"]).reshape(spec.weight_shape)
        if need_input_error:
            dcols = e3c @ wq.reshape(o, -1)
            e4 = col2im(dcols, c["x0"].shape, spec.kernel, spec.kernel, spec.stride, spec.pad)
        else:
            e4 = None
    if e4 is not None:
        e4 = e4.reshape(c["in_shape"])

    grads = GradientSet(g_W=g_W, g_Wq=q.qgw(g_W, rng))
    if spec.has_bn:
        axes = _stat_axes(e1)
        grads.g_gamma = (e1 * c["x2"]).sum(axis=axes)
        grads.g_beta = e1.sum(axis=axes)
        grads.g_gammaq = q.qggamma(grads.g_gamma)
        grads.g_betaq = q.qgbeta(grads.g_beta)
    out = ErrorTensor(e4, "e4") if e4 is not None else None
    return out, grads
