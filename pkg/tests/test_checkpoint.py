import hashlib
import struct
import zlib

import numpy as np
import pytest

from intflow import checkpoint as ckpt
from intflow.fxcore import FixedScalar
from intflow.netfwd import LayerSpec
from intflow.network import Model
from intflow.optim import FixedHyper, OptimizerState
from intflow.quantfn import BitWidthConfig
from intflow.trainer import TrainConfig, make_rngs, train

LAYERS = (LayerSpec("conv2d", 1, 2, kernel=3, stride=2, quantized=False),
          LayerSpec("dense", 2 * 2 * 2, 3),
          LayerSpec("dense", 3, 2, has_bn=False, relu=False, quantized=False))

# sha256 of the fixed checkpoint built by ``golden()``; any layout change must bump VERSION
GOLDEN_SHA256 = "6c7b0dd6af918de75fb1252eb84bcff8ca45ba9ab2acd0249263c02480974279"


def golden() -> ckpt.Checkpoint:
    cfg = BitWidthConfig()
    model = Model.build(LAYERS, cfg, np.random.Generator(np.random.Philox(7)), (1, 4, 4))
    opt = OptimizerState(acc={"1.W": np.ldexp(np.arange(-12, 12, dtype=float).reshape(3, 8), -12)},
                         step=3, saturation=1)
    hyper = FixedHyper(FixedScalar(3, -2), FixedScalar(26, -9))
    rngs = [ckpt.capture(g) for g in make_rngs(5)]
    return ckpt.Checkpoint(cfg, model, bn_backward="full", hyper=hyper, opt_state=opt,
                           rng_states=rngs, step=3, epoch=1)


def trained(tmp_path):
    rng = np.random.default_rng(0)
    x = np.floor(rng.uniform(0, 1, (64, 1, 4, 4)) * 256) / 256
    y = rng.integers(0, 2, 64)
    cfg = TrainConfig(layers=LAYERS, input_shape=(1, 4, 4), epochs=2, batch_size=16,
                      out_dir=str(tmp_path))
    train(cfg, (x, y, x, y))
    return tmp_path / "final.wgbn"


def test_golden_bytes():
    assert hashlib.sha256(ckpt.dumps(golden())).hexdigest() == GOLDEN_SHA256


def test_round_trip_is_byte_identical(tmp_path):
    path = trained(tmp_path)
    data = path.read_bytes()
    ck = ckpt.load(path)
    ckpt.save(tmp_path / "again.wgbn", ck)
    assert (tmp_path / "again.wgbn").read_bytes() == data


def test_round_trip_restores_state():
    ck = golden()
    back = ckpt.loads(ckpt.dumps(ck))
    assert back.cfg == ck.cfg and back.roles == ck.roles and back.hyper == ck.hyper
    assert (back.step, back.epoch, back.opt_state.saturation) == (3, 1, 1)
    for a, b in zip(ck.model.layers, back.model.layers):
        assert a.spec == b.spec
        assert np.array_equal(a.W, b.W)
    assert np.array_equal(back.opt_state.acc["1.W"], ck.opt_state.acc["1.W"])


def test_rng_state_resumes_stream():
    _, gen = make_rngs(5)
    state = ckpt.capture(gen)
    expected = gen.random(5)
    back = ckpt.loads(ckpt.dumps(ckpt.Checkpoint(BitWidthConfig(), golden().model,
                                                 rng_states=[state])))
    assert np.array_equal(ckpt.restore_generator(back.rng_states[0]).random(5), expected)


def test_quantized_weights_stored_as_mantissas():
    data = ckpt.dumps(golden())
    # the quantized dense weight record carries width 24 and exponent -23
    name = b"1.W"
    i = data.index(struct.pack("<H", len(name)) + name)
    role, dtype, k, exp = struct.unpack_from("<BBBh", data, i + 2 + len(name))
    assert (role, dtype, k, exp) == (0, 0, 24, -23)


def test_bad_magic():
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.loads(b"NOPE" + bytes(20))


def test_bad_version():
    data = bytearray(ckpt.dumps(golden()))
    data[4:6] = struct.pack("<H", 99)
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.loads(bytes(data))


def test_corruption_detected():
    data = bytearray(ckpt.dumps(golden()))
    data[40] ^= 1
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.loads(bytes(data))


def test_trailing_bytes_rejected():
    body = ckpt.dumps(golden())[:-4] + b"\0"
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.loads(body + struct.pack("<I", zlib.crc32(body)))


def test_missing_file(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(tmp_path / "absent.wgbn")


def test_trainer_checkpoint_metadata(tmp_path):
    ck = ckpt.load(trained(tmp_path))
    assert ck.epoch == 1 and ck.step == 8
    assert ck.bn_backward == "full" and len(ck.rng_states) == 2
