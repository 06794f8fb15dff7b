import gzip
import struct

import numpy as np
import pytest

from intflow.idx import (
    IMAGES_MAGIC,
    LABELS_MAGIC,
    DatasetError,
    load_dataset,
    read_idx,
    write_idx,
)


@pytest.mark.parametrize("suffix", [".idx", ".idx.gz"])
def test_round_trip(tmp_path, rng, suffix):
    a = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    p = tmp_path / f"x{suffix}"
    write_idx(p, a)
    assert np.array_equal(read_idx(p, IMAGES_MAGIC), a)


def test_gzip_output_is_reproducible(tmp_path):
    a = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_idx(tmp_path / "a.gz", a)
    write_idx(tmp_path / "b.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "l.idx"
    write_idx(p, np.zeros(4, dtype=np.uint8))
    with pytest.raises(DatasetError, match="magic"):
        read_idx(p, IMAGES_MAGIC)


@pytest.mark.parametrize("payload", [b"\x00\x00", struct.pack(">I", IMAGES_MAGIC) + b"\x00"])
def test_truncated_header(tmp_path, payload):
    p = tmp_path / "t.idx"
    p.write_bytes(payload)
    with pytest.raises(DatasetError, match="truncated"):
        read_idx(p, IMAGES_MAGIC)


def test_wrong_data_length(tmp_path):
    p = tmp_path / "s.idx"
    p.write_bytes(struct.pack(">II", LABELS_MAGIC, 5) + bytes(4))
    with pytest.raises(DatasetError, match="expected 5"):
        read_idx(p, LABELS_MAGIC)


def test_count_mismatch(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l.idx", np.zeros(4, dtype=np.uint8))
    with pytest.raises(DatasetError, match="count"):
        load_dataset(tmp_path / "i.idx", tmp_path / "l.idx")


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="cannot read"):
        read_idx(tmp_path / "none.idx", IMAGES_MAGIC)


def test_not_gzip(tmp_path):
    p = tmp_path / "fake.gz"
    p.write_bytes(b"plain bytes")
    with pytest.raises(DatasetError):
        read_idx(p, IMAGES_MAGIC)


def test_load_dataset_scaling(tmp_path):
    write_idx(tmp_path / "i.idx", np.array([[[0, 255]], [[128, 1]]], dtype=np.uint8))
    write_idx(tmp_path / "l.idx", np.array([3, 7], dtype=np.uint8))
    x, y = load_dataset(tmp_path / "i.idx", tmp_path / "l.idx")
    assert x.shape == (2, 1, 1, 2) and x.dtype == np.float64
    assert x[0, 0, 0, 1] == 255 / 256 and x[1, 0, 0, 0] == 0.5
    assert y.tolist() == [3, 7]


def test_bundled_subset(mnist_paths):
    x, y = load_dataset(mnist_paths["train_images"], mnist_paths["train_labels"])
    assert x.shape == (4000, 1, 28, 28)
    assert sorted(set(y.tolist())) == list(range(10))
    with gzip.open(mnist_paths["test_labels"]) as f:
        assert struct.unpack(">II", f.read(8)) == (LABELS_MAGIC, 1000)
