"""Bit-exact binary checkpoints.

Layout (little-endian throughout)::

    b"WGBN" u16 version
    widths: u8 count, u8 per width (BitWidthConfig field order), u8 e2_mode
    u8 role bitmask, u8 bn_backward, hyper: (i32 mantissa, i16 exp) for Mom then lr
    u64 step, u32 epoch
    input shape: u8 ndim, u32 dims
    layers: u16 count, per layer u8 kind, u32 fan_in, u32 fan_out, u8 kernel,
            u8 stride, u8 pad, u8 has_bn, u8 relu, u8 quantized
    tensors: u32 count, per record
            u16 name length, utf-8 name, u8 role, u8 dtype, u8 bit width,
            i16 resolution exp, u8 ndim, u32 dims, payload
            (dtype 0: i32 mantissas, 1: f64 values, 2: i64 mantissas)
    u64 accumulator saturation count
    rng: u8 count, per generator 4xu64 counter, 2xu64 key, 4xu64 buffer,
         i32 buffer_pos, u8 has_uint32, u32 uinteger
    u32 CRC-32 of everything above
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .fxcore import FixedScalar, to_fixed
from .netfwd import LayerSpec, LayerState
from .network import Model
from .optim import FixedHyper, OptimizerState
from .quantfn import ROLES, WIDTH_FIELDS, BitWidthConfig

MAGIC = b"WGBN"
VERSION = 1
ROLE_TAGS = {"W": 0, "gamma": 1, "beta": 2, "acc": 3}
_KINDS = ("dense", "conv2d")
_BN_MODES = ("frozen", "full")
_E2 = ("plain_shift", "flag")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: BitWidthConfig
    model: Model
    roles: frozenset = frozenset(ROLES)
    bn_backward: str = "full"
    hyper: FixedHyper | None = None
    opt_state: OptimizerState = field(default_factory=OptimizerState)
    rng_states: list = field(default_factory=list)
    step: int = 0
    epoch: int = 0


def _storage_width(cfg: BitWidthConfig, attr: str) -> int:
    return {"W": cfg.k_WU, "gamma": cfg.k_gammaU, "beta": cfg.k_betaU}[attr]


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def raw(self, b: bytes):
        self.buf.write(b)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b


def _write_tensor(w: _Writer, name: str, role: str, values: np.ndarray, k: int | None):
    values = np.asarray(values, dtype=np.float64)
    nb = name.encode()
    w.pack("H", len(nb))
    w.raw(nb)
    if k is None:
        w.pack("BBBhB", ROLE_TAGS[role], 1, 0, 0, values.ndim)
        w.pack(f"{values.ndim}I", *values.shape)
        w.raw(values.astype("<f8").tobytes())
        return
    q = to_fixed(values, k)
    dtype = 0 if k <= 32 else 2
    w.pack("BBBhB", ROLE_TAGS[role], dtype, k, q.resolution_exp, values.ndim)
    w.pack(f"{values.ndim}I", *values.shape)
    w.raw(q.mantissas.astype("<i4" if dtype == 0 else "<i8").tobytes())


def _read_tensor(r: _Reader):
    name = r.raw(r.unpack("H")).decode()
    role, dtype, k, exp, ndim = r.unpack("BBBhB")
    shape = tuple(np.atleast_1d(r.unpack(f"{ndim}I"))) if ndim else ()
    n = int(np.prod(shape, dtype=np.int64))
    if dtype == 1:
        vals = np.frombuffer(r.raw(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    elif dtype in (0, 2):
        size = 4 if dtype == 0 else 8
        m = np.frombuffer(r.raw(size * n), dtype="<i4" if dtype == 0 else "<i8").reshape(shape)
        if k < 2 or np.abs(m.astype(np.int64)).max(initial=0) > 2 ** (k - 1) - 1:
            raise CheckpointError(f"tensor {name!r} violates its {k}-bit range")
        vals = np.ldexp(m.astype(np.float64), exp)
    else:
        raise CheckpointError(f"unknown tensor dtype {dtype}")
    return name, role, vals


def _rng_state(gen: np.random.Generator) -> dict:
    st = gen.bit_generator.state
    if st["bit_generator"] != "Philox":
        raise CheckpointError("only Philox generators can be checkpointed")
    return st


def dumps(ck: Checkpoint) -> bytes:
    cfg, model = ck.cfg, ck.model
    hyper = ck.hyper or FixedHyper(FixedScalar(0, 0), FixedScalar(1, 0))
    w = _Writer()
    w.raw(MAGIC)
    w.pack("H", VERSION)
    w.pack("B", len(WIDTH_FIELDS))
    w.pack(f"{len(WIDTH_FIELDS)}B", *(getattr(cfg, f) for f in WIDTH_FIELDS))
    w.pack("B", _E2.index(cfg.e2_mode))
    w.pack("B", sum(1 << i for i, role in enumerate(ROLES) if role in ck.roles))
    w.pack("B", _BN_MODES.index(ck.bn_backward))
    w.pack("ihih", hyper.mom.mantissa, hyper.mom.resolution_exp,
           hyper.lr.mantissa, hyper.lr.resolution_exp)
    w.pack("QI", ck.step, ck.epoch)
    w.pack("B", len(model.input_shape))
    w.pack(f"{len(model.input_shape)}I", *model.input_shape)
    w.pack("H", len(model.layers))
    for st in model.layers:
        s = st.spec
        w.pack("BIIBBBBBB", _KINDS.index(s.kind), s.fan_in, s.fan_out, s.kernel, s.stride,
               s.pad, s.has_bn, s.relu, s.quantized)

    fixed_update = "U" in ck.roles
    records = []
    for name, i, attr in model.parameters():
        st = model.layers[i]
        k = _storage_width(cfg, attr) if st.spec.quantized and fixed_update else None
        records.append((name, attr, getattr(st, attr), k))
    for name in sorted(ck.opt_state.acc):
        i = int(name.split(".")[0])
        k = cfg.k_Acc if model.layers[i].spec.quantized and fixed_update else None
        records.append((f"acc:{name}", "acc", ck.opt_state.acc[name], k))
    w.pack("I", len(records))
    for rec in records:
        _write_tensor(w, *rec)
    w.pack("Q", ck.opt_state.saturation)

    w.pack("B", len(ck.rng_states))
    for st in ck.rng_states:
        s = st["state"]
        w.pack("4Q", *[int(v) for v in s["counter"]])
        w.pack("2Q", *[int(v) for v in s["key"]])
        w.pack("4Q", *[int(v) for v in st["buffer"]])
        w.pack("iBI", st["buffer_pos"], st["has_uint32"], st["uinteger"])
    body = w.buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> Checkpoint:
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.raw(4)
    version = r.unpack("H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    nw = r.unpack("B")
    if nw != len(WIDTH_FIELDS):
        raise CheckpointError("width table has the wrong length")
    widths = dict(zip(WIDTH_FIELDS, np.atleast_1d(r.unpack(f"{nw}B")).tolist()))
    cfg = BitWidthConfig(**widths, e2_mode=_E2[r.unpack("B")])
    mask = r.unpack("B")
    roles = frozenset(role for i, role in enumerate(ROLES) if mask >> i & 1)
    bn_backward = _BN_MODES[r.unpack("B")]
    mm, me, lm, le = r.unpack("ihih")
    hyper = FixedHyper(FixedScalar(mm, me), FixedScalar(lm, le))
    step, epoch = r.unpack("QI")
    nd = r.unpack("B")
    input_shape = tuple(np.atleast_1d(r.unpack(f"{nd}I")).tolist())
    layers = []
    for _ in range(r.unpack("H")):
        kind, fi, fo, ker, stri, pad, bn, relu, qz = r.unpack("BIIBBBBBB")
        spec = LayerSpec(_KINDS[kind], fi, fo, kernel=ker, stride=stri, pad=pad,
                         has_bn=bool(bn), relu=bool(relu), quantized=bool(qz))
        layers.append(LayerState(spec, np.zeros(spec.weight_shape)))
    model = Model(layers, input_shape)
    opt = OptimizerState(step=step)
    for _ in range(r.unpack("I")):
        name, role, vals = _read_tensor(r)
        if name.startswith("acc:"):
            opt.acc[name[4:]] = vals
            continue
        i, attr = name.split(".")
        st = layers[int(i)]
        expected = st.spec.weight_shape if attr == "W" else (st.spec.fan_out,)
        if vals.shape != expected:
            raise CheckpointError(f"tensor {name!r} has shape {vals.shape}, expected {expected}")
        setattr(st, attr, vals)
    opt.saturation = r.unpack("Q")
    rngs = []
    for _ in range(r.unpack("B")):
        counter = np.array(r.unpack("4Q"), dtype=np.uint64)
        key = np.array(r.unpack("2Q"), dtype=np.uint64)
        buffer = np.array(r.unpack("4Q"), dtype=np.uint64)
        pos, has32, uint = r.unpack("iBI")
        rngs.append({"bit_generator": "Philox", "state": {"counter": counter, "key": key},
                     "buffer": buffer, "buffer_pos": pos, "has_uint32": has32, "uinteger": uint})
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint body")
    return Checkpoint(cfg, model, roles, bn_backward, hyper, opt, rngs, step, epoch)


def save(path, ck: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(dumps(ck))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def restore_generator(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


def capture(gen: np.random.Generator) -> dict:
    return _rng_state(gen)
