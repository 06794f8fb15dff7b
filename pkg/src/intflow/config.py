"""Flat ``key = value`` training configuration.

Example::

    # full 8-bit run with flag-coded E2
    topology = conv2d 1 8 k3 s2 fp; conv2d 8 16 k3 s2; dense 784 64; dense 64 10 nobn norelu fp
    input_shape = 1,28,28
    k_WU = 24
    momentum = 3*2^-2
    lr_schedule = 0:26*2^-9, 10:13*2^-9, 20:6*2^-9
    dr_schedule = 0:8, 10:7, 20:6
    roles = W,A,BN,E1,E2,G,U

Fixed-point constants are written ``mantissa*2^exp`` (or as a plain
integer), so every value enters on its grid.  ``lr = x`` is shorthand for a
single-entry ``lr_schedule``.  Width keys default to :class:`BitWidthConfig`.
"""
from __future__ import annotations

import re

from .fxcore import FixedScalar
from .netfwd import LayerSpec
from .optim import DEFAULT_HYPER, FixedHyper
from .quantfn import E2_MODES, ROLES, WIDTH_FIELDS, BitWidthConfig, DrSchedule, WidthIdentityError
from .trainer import TrainConfig

_FIXED_RE = re.compile(r"^([+-]?\d+)\s*(?:\*\s*2\s*\^\s*([+-]?\d+))?$")
_INT_KEYS = ("batch_size", "epochs", "seed", "log_every", "eval_batch", "keep_checkpoints")
_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "out_dir")
KEYS = frozenset(
    ("topology", "input_shape", "e2_mode", "momentum", "lr", "lr_schedule", "dr_schedule",
     "roles", "bn_backward") + _INT_KEYS + _PATH_KEYS + WIDTH_FIELDS
)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def parse_fixed(text: str) -> FixedScalar:
    m = _FIXED_RE.match(text.strip())
    if not m:
        raise ValueError(f"{text.strip()!r} is not a fixed-point literal; write mantissa*2^exp")
    return FixedScalar(int(m.group(1)), int(m.group(2) or 0))


def render_fixed(x: FixedScalar) -> str:
    return f"{x.mantissa}*2^{x.resolution_exp}"


def _parse_int(text: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", text):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(text)


def _parse_layer(text: str) -> LayerSpec:
    parts = text.split()
    if len(parts) < 3:
        raise ValueError(f"layer {text!r} needs: kind fan_in fan_out [options]")
    kind, fan_in, fan_out = parts[0], _parse_int(parts[1]), _parse_int(parts[2])
    kw = {}
    for opt in parts[3:]:
        if opt in ("nobn", "norelu", "fp"):
            kw[{"nobn": "has_bn", "norelu": "relu", "fp": "quantized"}[opt]] = False
        elif opt[:1] in "ksp" and opt[1:].isdigit():
            kw[{"k": "kernel", "s": "stride", "p": "pad"}[opt[0]]] = int(opt[1:])
        else:
            raise ValueError(f"unknown layer option {opt!r}")
    return LayerSpec(kind, fan_in, fan_out, **kw)


def _render_layer(s: LayerSpec) -> str:
    out = [s.kind, str(s.fan_in), str(s.fan_out)]
    if s.kind == "conv2d":
        out += [f"k{s.kernel}", f"s{s.stride}", f"p{s.pad}"]
    if not s.has_bn:
        out.append("nobn")
    if not s.relu:
        out.append("norelu")
    if not s.quantized:
        out.append("fp")
    return " ".join(out)


def _pairs(text: str, value_parser):
    out = []
    for item in text.split(","):
        if ":" not in item:
            raise ValueError(f"schedule entry {item.strip()!r} must be epoch:value")
        ep, val = item.split(":", 1)
        out.append((_parse_int(ep.strip()), value_parser(val.strip())))
    return tuple(out)


def _parse_roles(text: str) -> frozenset:
    if text.strip() == "none":
        return frozenset()
    roles = [r.strip() for r in text.split(",")]
    bad = [r for r in roles if r not in ROLES]
    if bad:
        raise ValueError(f"unknown roles {bad}; choose from {','.join(ROLES)} or none")
    return frozenset(roles)


def parse_config(text: str) -> TrainConfig:
    """Parse and validate; raises :class:`ConfigError` (with a line number when
    one applies) or :class:`WidthIdentityError` for broken width identities."""
    seen: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key][0]})", lineno)
        if not value:
            raise ConfigError(f"empty value for {key!r}", lineno)
        seen[key] = (lineno, value)
    if "lr" in seen and "lr_schedule" in seen:
        raise ConfigError("give either lr or lr_schedule, not both", seen["lr_schedule"][0])

    kw: dict = {}
    widths: dict = {}
    mom = None
    for key, (lineno, value) in seen.items():
        try:
            if key in WIDTH_FIELDS:
                widths[key] = _parse_int(value)
            elif key == "e2_mode":
                if value not in E2_MODES:
                    raise ValueError(f"e2_mode must be one of {E2_MODES}")
                widths["e2_mode"] = value
            elif key == "momentum":
                mom = parse_fixed(value)
            elif key == "lr":
                kw["lr_schedule"] = ((0, parse_fixed(value)),)
            elif key == "lr_schedule":
                kw["lr_schedule"] = _pairs(value, parse_fixed)
            elif key == "dr_schedule":
                kw["dr_schedule"] = DrSchedule(_pairs(value, _parse_int))
            elif key == "topology":
                kw["layers"] = tuple(_parse_layer(s) for s in value.split(";"))
            elif key == "input_shape":
                kw["input_shape"] = tuple(_parse_int(s.strip()) for s in value.split(","))
            elif key == "roles":
                kw["roles"] = _parse_roles(value)
            elif key == "bn_backward":
                if value not in ("frozen", "full"):
                    raise ValueError("bn_backward must be frozen or full")
                kw["bn_backward"] = value
            elif key in _INT_KEYS:
                kw[key] = _parse_int(value)
            else:
                kw[key] = value
        except ValueError as exc:
            raise ConfigError(str(exc), lineno) from exc

    cfg_widths = BitWidthConfig(**widths)  # WidthIdentityError propagates
    lr0 = kw.get("lr_schedule", TrainConfig.lr_schedule)[0][1]
    try:
        kw["hyper"] = FixedHyper(mom if mom is not None else DEFAULT_HYPER.mom, lr0)
        return TrainConfig(widths=cfg_widths, **kw)
    except WidthIdentityError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), _blame(str(exc), seen)) from exc


_BLAME = (
    ("momentum", ("momentum",)),
    ("lr", ("lr_schedule", "lr")),
    ("dr schedule", ("dr_schedule",)),
    ("evaluation batch", ("eval_batch",)),
    ("batch size", ("batch_size",)),
    ("quantized gradients", ("roles",)),
)


def _blame(message: str, seen: dict) -> int | None:
    """Line of the key most likely responsible for a validation message."""
    for needle, keys in _BLAME:
        if needle in message:
            for key in keys:
                if key in seen:
                    return seen[key][0]
    return None


def render_config(cfg: TrainConfig) -> str:
    """Text that :func:`parse_config` maps back to an equal config."""
    lines = [
        "topology = " + "; ".join(_render_layer(s) for s in cfg.layers),
        "input_shape = " + ",".join(str(v) for v in cfg.input_shape),
    ]
    for name in WIDTH_FIELDS:
        lines.append(f"{name} = {getattr(cfg.widths, name)}")
    lines.append(f"e2_mode = {cfg.widths.e2_mode}")
    lines.append(f"momentum = {render_fixed(cfg.hyper.mom)}")
    lines.append("lr_schedule = " + ", ".join(f"{e}:{render_fixed(v)}" for e, v in cfg.lr_schedule))
    lines.append("dr_schedule = " + ", ".join(f"{e}:{k}" for e, k in cfg.dr_schedule.breakpoints))
    roles = [r for r in ROLES if r in cfg.roles]
    lines.append("roles = " + (",".join(roles) if roles else "none"))
    lines.append(f"bn_backward = {cfg.bn_backward}")
    for key in _INT_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)}")
    for key in _PATH_KEYS:
        val = getattr(cfg, key)
        if val is not None:
            lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"

