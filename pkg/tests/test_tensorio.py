import hashlib

import numpy as np
import pytest

from msholo import tensorio
from conftest import random_field_array


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.complex64, np.complex128])
def test_round_trip_bit_exact(tmp_path, rng, dtype):
    if np.issubdtype(dtype, np.complexfloating):
        t = random_field_array(rng, (3, 5), dtype)
    else:
        t = rng.standard_normal((3, 5)).astype(dtype)
    path = tmp_path / "t.tnsr"
    tensorio.write_tensor(path, t)
    back = tensorio.read_tensor(path)
    assert back.dtype == np.dtype(dtype).newbyteorder("<")
    assert np.array_equal(back, t)


def test_rewrite_is_byte_identical(tmp_path, rng):
    t = rng.standard_normal((7, 4, 2)).astype(np.float32)
    p1, p2 = tmp_path / "a.tnsr", tmp_path / "b.tnsr"
    tensorio.write_tensor(p1, t)
    tensorio.write_tensor(p2, tensorio.read_tensor(p1))
    h1 = hashlib.sha256(p1.read_bytes()).hexdigest()
    h2 = hashlib.sha256(p2.read_bytes()).hexdigest()
    assert h1 == h2


def test_rank_and_shape_round_trip(tmp_path, rng):
    t = rng.standard_normal((2, 3, 4, 5))
    tensorio.write_tensor(tmp_path / "t.tnsr", t)
    assert tensorio.read_tensor(tmp_path / "t.tnsr").shape == (2, 3, 4, 5)


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.tnsr"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(tensorio.TensorFileError):
        tensorio.read_tensor(path)


def test_rejects_truncated_payload(tmp_path, rng):
    path = tmp_path / "t.tnsr"
    tensorio.write_tensor(path, rng.standard_normal((4, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(tensorio.TensorFileError):
        tensorio.read_tensor(path)


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(tensorio.TensorFileError):
        tensorio.write_tensor(tmp_path / "t.tnsr", np.arange(4, dtype=np.int32))


def test_bundle_round_trip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 3)), "b": random_field_array(rng, (2, 2))}
    tensorio.write_bundle(tmp_path / "bundle", arrays, {"note": 1})
    back, meta = tensorio.read_bundle(tmp_path / "bundle")
    assert meta["note"] == 1
    assert np.array_equal(back["a"], arrays["a"])
    assert np.array_equal(back["b"], arrays["b"])


class TestPng:
    def test_half_gray_rounds_up(self, tmp_path):
        tensorio.write_png(tmp_path / "g.png", np.full((4, 4), 0.5), bit_depth=8)
        back = tensorio.read_png(tmp_path / "g.png")
        assert np.all(back * 255 == 128)

    def test_16bit_round_trip_accuracy(self, tmp_path, rng):
        img = rng.random((8, 8))
        tensorio.write_png(tmp_path / "g.png", img, bit_depth=16)
        back = tensorio.read_png(tmp_path / "g.png")
        assert np.max(np.abs(back - img)) <= 0.5 / 65535

    def test_rejects_out_of_range(self, tmp_path):
        with pytest.raises(tensorio.TensorFileError):
            tensorio.write_png(tmp_path / "g.png", np.full((2, 2), 1.5))
