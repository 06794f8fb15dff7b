"""``intflow`` command line: train, eval, inspect.

Exit codes: 0 ok, 2 config error, 3 dataset error, 4 width-identity
violation, 5 checkpoint error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, parse_config, render_config
from .fxcore import to_fixed
from .idx import DatasetError, load_dataset
from .quantfn import Quantizer, WidthIdentityError
from .trainer import emit_histograms, load_data, make_rngs, memory_report, predict, train

EXIT_CONFIG, EXIT_DATASET, EXIT_WIDTH, EXIT_CHECKPOINT = 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("intflow")


def _setup_logging() -> None:
    name = os.environ.get("INTFLOW_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"INTFLOW_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def _resolve(base: Path, path: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else base / p)


def cmd_train(args) -> int:
    path = Path(args.config)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text)
    base = path.parent
    updates = {k: _resolve(base, getattr(cfg, k))
               for k in ("train_images", "train_labels", "test_images", "test_labels")}
    if args.data_images or args.data_labels:
        if not (args.data_images and args.data_labels):
            raise ConfigError("--data-images and --data-labels must be given together")
        updates["train_images"], updates["train_labels"] = args.data_images, args.data_labels
    if not updates["train_images"] or not updates["train_labels"]:
        raise ConfigError("no training data: set train_images/train_labels or pass --data-*")
    if args.seed is not None:
        updates["seed"] = args.seed
    out = args.out or _resolve(base, cfg.out_dir) or "run"
    updates["out_dir"] = out
    cfg = replace(cfg, **updates)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(render_config(cfg), encoding="utf-8")
    model, metrics = train(cfg)
    if cfg.epochs > 0:
        xtr, ytr, _, _ = load_data(cfg)
        xb, yb = xtr[: cfg.batch_size], ytr[: cfg.batch_size]
        q = Quantizer(cfg.widths, cfg.roles, dr_bits=cfg.dr_schedule.k_at(cfg.epochs - 1))
        emit_histograms(model, xb, yb, q, out_dir / "histograms", make_rngs(cfg.seed)[1],
                        bn_backward=cfg.bn_backward)
        last = metrics.epoch_rows()[-1]
        print(f"epoch={last['epoch']} train_acc={last['train_acc']} test_acc={last['test_acc']}")
    return 0


def _load_checkpoint(path) -> ckpt.Checkpoint:
    if path is None:
        raise ckpt.CheckpointError("--checkpoint is required")
    return ckpt.load(path)


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    if not (args.data_images and args.data_labels):
        raise DatasetError("eval needs --data-images and --data-labels")
    x, y = load_dataset(args.data_images, args.data_labels)
    if tuple(x.shape[1:]) != ck.model.input_shape:
        raise DatasetError(f"data shape {x.shape[1:]} does not match model {ck.model.input_shape}")
    q = Quantizer(ck.cfg, ck.roles)
    top1 = float(np.mean(predict(ck.model, x, q, args.batch).argmax(axis=1) == y))
    sys.stdout.write(f"top1={top1!r}\n")
    return 0


def tensor_table(ck: ckpt.Checkpoint) -> list[tuple]:
    """``(name, width, shape, min, max)``; min/max are mantissas for fixed-point tensors."""
    rows = []
    fixed_update = "U" in ck.roles
    cfg = ck.cfg
    for name, i, attr in ck.model.parameters():
        st = ck.model.layers[i]
        vals = getattr(st, attr)
        k = {"W": cfg.k_WU, "gamma": cfg.k_gammaU, "beta": cfg.k_betaU}[attr]
        rows.append(_row(name, vals, k if st.spec.quantized and fixed_update else None))
    for name in sorted(ck.opt_state.acc):
        i = int(name.split(".")[0])
        quant = ck.model.layers[i].spec.quantized and fixed_update
        rows.append(_row(f"acc:{name}", ck.opt_state.acc[name], cfg.k_Acc if quant else None))
    return rows


def _row(name, vals, k):
    if k is None:
        return name, "fp64", vals.shape, float(vals.min()), float(vals.max())
    m = to_fixed(vals, k).mantissas
    return name, k, vals.shape, int(m.min()), int(m.max())


def cmd_inspect(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    print(f"step={ck.step} epoch={ck.epoch} e2_mode={ck.cfg.e2_mode} "
          f"roles={','.join(sorted(ck.roles)) or 'none'} bn_backward={ck.bn_backward}")
    print("name\twidth\tshape\tmin\tmax")
    for name, k, shape, lo, hi in tensor_table(ck):
        print(f"{name}\t{k}\t{'x'.join(map(str, shape))}\t{lo}\t{hi}")
    rep = memory_report(ck.model, ck.cfg, ck.roles)
    for key, val in rep.items():
        print(f"memory.{key}={val}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intflow", description="Integer-arithmetic training engine")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--data-images")
    t.add_argument("--data-labels")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-images")
    e.add_argument("--data-labels")
    e.add_argument("--batch", type=int, default=250)
    e.set_defaults(func=cmd_eval)
    i = sub.add_parser("inspect", help="list checkpoint tensors and memory use")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except WidthIdentityError as exc:
        print("width identity violation:", file=sys.stderr)
        for line in exc.violations:
            print(f"  {line}", file=sys.stderr)
        return EXIT_WIDTH
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
