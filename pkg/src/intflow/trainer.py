"""Training loop, evaluation, histogram emission and memory accounting."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .netbwd import loss_and_error
from .fxcore import FixedScalar
from .idx import DatasetError, load_dataset
from .network import Model, desk_convnet
from .optim import DEFAULT_HYPER, FixedHyper, MomentumOptimizer, OptimizerState
from .quantfn import ROLES, BitWidthConfig, DrSchedule, Quantizer, coverage_ratio

log = logging.getLogger("intflow")

METRICS_HEADER = ("epoch", "step", "loss", "train_acc", "test_acc", "lr_mantissa", "lr_exp",
                  "dr", "acc_saturation")


@dataclass
class TrainConfig:
    layers: tuple = field(default_factory=lambda: tuple(desk_convnet()))
    input_shape: tuple = (1, 28, 28)
    widths: BitWidthConfig = field(default_factory=BitWidthConfig)
    hyper: FixedHyper = DEFAULT_HYPER
    batch_size: int = 32
    epochs: int = 30
    dr_schedule: DrSchedule = field(default_factory=lambda: DrSchedule(((0, 8), (10, 7), (20, 6))))
    lr_schedule: tuple = ((0, FixedScalar(26, -9)), (10, FixedScalar(13, -9)),
                          (20, FixedScalar(6, -9)))
    seed: int = 0
    roles: frozenset = frozenset(ROLES)
    bn_backward: str = "full"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    out_dir: str | None = None
    log_every: int = 0
    eval_batch: int = 250
    keep_checkpoints: int = 2

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.roles = frozenset(self.roles)
        self.lr_schedule = tuple((int(e), lr) for e, lr in self.lr_schedule)
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for batch statistics")
        if self.eval_batch < 2:
            raise ValueError("evaluation batch must be >= 2")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ValueError("lr schedule must start at epoch 0")
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr schedule epochs must be strictly increasing")
        self.hyper = self.hyper.with_lr(self.lr_schedule[0][1])
        if "U" in self.roles and "G" not in self.roles:
            raise ValueError("fixed-point updates need quantized gradients (role G)")
        if "U" in self.roles:
            for _, lr in self.lr_schedule:
                self.hyper.with_lr(lr).check(self.widths)
        for _, k in self.dr_schedule.breakpoints:
            if k > self.widths.k_GC:
                raise ValueError(f"dr schedule width {k} exceeds k_GC = {self.widths.k_GC}")

    def lr_at(self, epoch: int) -> FixedScalar:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr


@dataclass
class Metrics:
    rows: list = field(default_factory=list)
    coverage: list = field(default_factory=list)  # (epoch, layer, flag, plain)
    step_losses: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in METRICS_HEADER})

    def epoch_rows(self):
        return [r for r in self.rows if r["test_acc"] != ""]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=METRICS_HEADER, lineterminator="\n")
            wr.writeheader()
            for row in self.rows:
                wr.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def make_rngs(seed: int):
    """Independent Philox streams: data order / init, and stochastic rounding."""
    data_seq, round_seq = np.random.SeedSequence(seed).spawn(2)
    return (np.random.Generator(np.random.Philox(data_seq)),
            np.random.Generator(np.random.Philox(round_seq)))


def eval_chunks(n: int, size: int):
    """Contiguous batches of ``size``; a trailing single sample joins the previous batch."""
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        bounds.pop(-2)
    return list(zip(bounds[:-1], bounds[1:]))


def predict(model: Model, x: np.ndarray, q: Quantizer, batch: int = 250) -> np.ndarray:
    """Logits for every sample; BN uses each evaluation batch's own statistics."""
    if len(x) < 2:
        raise ValueError("evaluation needs at least 2 samples")
    out = [model.forward(x[a:b], q, train=False) for a, b in eval_chunks(len(x), batch)]
    return np.concatenate(out)


def inference_forward(model: Model, x: np.ndarray, cfg: BitWidthConfig,
                      roles=ROLES, batch: int = 250) -> np.ndarray:
    return predict(model, x, Quantizer(cfg, roles), batch)


def accuracy(model: Model, x, y, q: Quantizer, batch: int = 250) -> float:
    return float(np.mean(predict(model, x, q, batch).argmax(axis=1) == y))


def load_data(cfg: TrainConfig):
    xtr, ytr = load_dataset(cfg.train_images, cfg.train_labels)
    if cfg.test_images:
        xte, yte = load_dataset(cfg.test_images, cfg.test_labels)
    else:
        xte, yte = xtr, ytr
    return xtr, ytr, xte, yte


def _check_data(model: Model, x: np.ndarray, y: np.ndarray) -> None:
    if tuple(x.shape[1:]) != model.input_shape:
        raise DatasetError(f"data shape {x.shape[1:]} does not match model input {model.input_shape}")
    classes = model.output_shape[0]
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise DatasetError(f"labels outside [0, {classes})")


def train_step(model: Model, opt: MomentumOptimizer, xb, yb, q: Quantizer, round_rng,
               cfg: TrainConfig) -> float:
    logits = model.forward(xb, q, train=True)
    loss, e_top = loss_and_error(logits, yb)
    grads = model.backward(e_top, q, round_rng, cfg.bn_backward)
    fixed_update = "U" in cfg.roles
    w = cfg.widths
    for name, i, attr in model.parameters():
        st, g = model.layers[i], grads[i]
        quant = st.spec.quantized
        gq = {"W": g.g_Wq, "gamma": g.g_gammaq, "beta": g.g_betaq}[attr] if quant else \
            {"W": g.g_W, "gamma": g.g_gamma, "beta": g.g_beta}[attr]
        k_store = {"W": w.k_WU, "gamma": w.k_gammaU, "beta": w.k_betaU}[attr]
        new = opt.step_param(name, getattr(st, attr), gq, quant and fixed_update, k_store)
        setattr(st, attr, new)
    opt.state.step += 1
    return loss


def train(cfg: TrainConfig, data=None, model: Model | None = None):
    """Run ``cfg.epochs`` epochs; returns ``(model, metrics)``."""
    data_rng, round_rng = make_rngs(cfg.seed)
    if model is None:
        model = Model.build(cfg.layers, cfg.widths, data_rng, cfg.input_shape)
    if data is None:
        data = load_data(cfg)
    xtr, ytr, xte, yte = data
    _check_data(model, xtr, ytr)
    _check_data(model, xte, yte)
    opt = MomentumOptimizer(cfg.widths, cfg.hyper, OptimizerState())
    metrics = Metrics()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    n = len(xtr)
    nb = n // cfg.batch_size
    if nb == 0:
        raise ValueError("training set is smaller than one batch")

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        opt.hyper = cfg.hyper.with_lr(lr)
        dr_bits = cfg.dr_schedule.k_at(epoch)
        q = Quantizer(cfg.widths, cfg.roles, dr_bits=dr_bits)
        perm = data_rng.permutation(n)
        window = []
        for b in range(nb):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss = train_step(model, opt, xtr[idx], ytr[idx], q, round_rng, cfg)
            metrics.step_losses.append(loss)
            window.append(loss)
            if cfg.log_every and opt.state.step % cfg.log_every == 0:
                metrics.add(epoch=epoch, step=opt.state.step, loss=float(np.mean(window)),
                            lr_mantissa=lr.mantissa, lr_exp=lr.resolution_exp,
                            dr=2 ** (dr_bits - 1), acc_saturation=opt.state.saturation)
                window = []
        _record_coverage(model, cfg, epoch, metrics)
        model.clear_cache()
        train_acc = accuracy(model, xtr, ytr, q, cfg.eval_batch)
        test_acc = accuracy(model, xte, yte, q, cfg.eval_batch)
        epoch_loss = float(np.mean(metrics.step_losses[-nb:]))
        metrics.add(epoch=epoch, step=opt.state.step, loss=epoch_loss, train_acc=train_acc,
                    test_acc=test_acc, lr_mantissa=lr.mantissa, lr_exp=lr.resolution_exp,
                    dr=2 ** (dr_bits - 1), acc_saturation=opt.state.saturation)
        log.info("epoch %d loss %.4f train %.4f test %.4f", epoch, epoch_loss, train_acc, test_acc)
        if out:
            _save_epoch(out, cfg, model, opt, [data_rng, round_rng], epoch)
            metrics.write_csv(out / "metrics.csv")
    if out:
        metrics.write_csv(out / "metrics.csv")
    return model, metrics


def _record_coverage(model: Model, cfg: TrainConfig, epoch: int, metrics: Metrics) -> None:
    for i, st in enumerate(model.layers):
        errs = st.cache.get("errors")
        if not st.spec.quantized or errs is None or not np.any(errs["e3_pre"]):
            continue
        pre = errs["e3_pre"]
        metrics.coverage.append((epoch, i, coverage_ratio(pre, cfg.widths.k_E2, "flag"),
                                 coverage_ratio(pre, cfg.widths.k_E2, "plain_shift")))


def make_checkpoint(cfg: TrainConfig, model: Model, opt: MomentumOptimizer, rngs,
                    epoch: int) -> ckpt.Checkpoint:
    return ckpt.Checkpoint(cfg.widths, model, cfg.roles, cfg.bn_backward, opt.hyper, opt.state,
                           [ckpt.capture(g) for g in rngs], opt.state.step, epoch)


def _save_epoch(out: Path, cfg, model, opt, rngs, epoch: int) -> None:
    path = out / f"checkpoint-epoch{epoch:04d}.wgbn"
    ckpt.save(path, make_checkpoint(cfg, model, opt, rngs, epoch))
    ckpt.save(out / "final.wgbn", make_checkpoint(cfg, model, opt, rngs, epoch))
    old = sorted(out.glob("checkpoint-epoch*.wgbn"))
    for p in old[: max(len(old) - cfg.keep_checkpoints, 0)]:
        p.unlink()


# ---------------------------------------------------------------------------
# histograms


def _hist_rows(values: np.ndarray, edges: np.ndarray):
    counts, _ = np.histogram(values, bins=edges)
    return [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def _write_hist(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("bin_left", "bin_right", "count"))
        for a, b, c in rows:
            wr.writerow((repr(a), repr(b), c))


def _log2_edges(values: np.ndarray, pad: int = 2) -> np.ndarray:
    nz = np.abs(values[values != 0])
    if nz.size == 0:
        return np.array([0.0, 1.0])
    lo = int(np.floor(np.log2(nz.min()))) - pad
    hi = int(np.ceil(np.log2(nz.max()))) + pad
    return np.arange(lo, hi + 1, dtype=np.float64)


def emit_histograms(model: Model, xb, yb, q: Quantizer, out_dir, rng=None, bins: int = 64,
                    bn_backward: str = "full") -> list[Path]:
    """Pre/post-quantization histograms of W, BN, A, G and E for each quantized layer.

    Linear-bin files share bin edges between the pre and post version of a
    role.  E additionally gets histograms of log2|value| so the small-magnitude
    tail is visible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
    logits = model.forward(xb, q, train=True)
    _, e_top = loss_and_error(logits, yb)
    grads = model.backward(e_top, q, rng, bn_backward)
    written = []
    for i, st in enumerate(model.layers):
        if not st.spec.quantized:
            continue
        c = st.cache
        errs = c["errors"]
        pairs = {
            "W": (st.W, c["wq"]),
            "A": (c["a_pre"], c["x4"]),
            "G": (grads[i].g_W, grads[i].g_Wq),
            "E1": (errs["e0_pre"], errs["e0"]),
            "E2": (errs["e3_pre"], errs["e3"]),
        }
        if st.spec.has_bn:
            pairs["BN"] = (c["x2_pre"], c["x2"])
        for role, (pre, post) in pairs.items():
            pre = np.ravel(pre)
            post = np.ravel(post)
            lo = min(pre.min(), post.min())
            hi = max(pre.max(), post.max())
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, bins + 1)
            for tag, vals in (("pre", pre), ("post", post)):
                p = out / f"hist_{role}_layer{i}_{tag}.csv"
                _write_hist(p, _hist_rows(vals, edges))
                written.append(p)
            if role.startswith("E"):
                edges = _log2_edges(np.concatenate([pre, post]))
                for tag, vals in (("pre", pre), ("post", post)):
                    nz = np.abs(vals[vals != 0])
                    p = out / f"hist_{role}_layer{i}_{tag}_log2.csv"
                    _write_hist(p, _hist_rows(np.log2(nz), edges))
                    written.append(p)
    model.clear_cache()
    return written


# ---------------------------------------------------------------------------
# memory accounting


def activation_sizes(model: Model) -> list[int]:
    """Per-sample output element count of every layer."""
    sizes = []
    shape = model.input_shape
    for st in model.layers:
        shape = st.spec.output_shape(shape if st.spec.kind == "conv2d" else (int(np.prod(shape)),))
        sizes.append(int(np.prod(shape)))
    return sizes


def memory_report(model: Model, cfg: BitWidthConfig, roles=ROLES, baseline_bits: int = 32) -> dict:
    """Bit totals per role and the inference-path (W + A) saving versus 32-bit storage.

    ``ratio`` covers the quantized layers; ``overall_ratio`` also counts the
    full-precision first/last layers at the baseline width.
    """
    roles = frozenset(roles)
    kw = cfg.k_W if "W" in roles else baseline_bits
    ka = cfg.k_A if "A" in roles else baseline_bits
    rep = {"W_compute": 0, "W_storage": 0, "A": 0, "BN": 0, "Acc": 0}
    base_q = low_q = base_all = low_all = 0
    for st, n_act in zip(model.layers, activation_sizes(model)):
        n_w = int(np.prod(st.spec.weight_shape))
        n_bn = 2 * st.spec.fan_out if st.spec.has_bn else 0
        if st.spec.quantized:
            rep["W_compute"] += n_w * kw
            rep["W_storage"] += n_w * (cfg.k_WU if "U" in roles else baseline_bits)
            rep["A"] += n_act * ka
            rep["BN"] += n_bn // 2 * (cfg.k_gammaU + cfg.k_betaU) if "U" in roles else n_bn * baseline_bits
            rep["Acc"] += (n_w + n_bn) * (cfg.k_Acc if "U" in roles else baseline_bits)
            base_q += (n_w + n_act) * baseline_bits
            low_q += n_w * kw + n_act * ka
            low_all += n_w * kw + n_act * ka
        else:
            for key, n in (("W_compute", n_w), ("W_storage", n_w), ("A", n_act), ("BN", n_bn),
                           ("Acc", n_w + n_bn)):
                rep[key] += n * baseline_bits
            low_all += (n_w + n_act) * baseline_bits
        base_all += (n_w + n_act) * baseline_bits
    rep["total_bits"] = sum(rep[k] for k in ("W_storage", "A", "BN", "Acc"))
    rep["inference_bits"] = low_q
    rep["inference_baseline_bits"] = base_q
    rep["ratio"] = base_q / low_q if low_q else 1.0
    rep["overall_ratio"] = base_all / low_all if low_all else 1.0
    return rep

