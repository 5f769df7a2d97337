import io
import struct

import numpy as np
import pytest

from mvmseg import tensorfile as tf


def round_trip(arr):
    buf = io.BytesIO()
    tf.write_tensor(buf, arr)
    buf.seek(0)
    return tf.read_tensor(buf)


@pytest.mark.parametrize("shape", [(), (0,), (7,), (3, 4), (2, 1, 5, 6)])
def test_float32_round_trip(rng, shape):
    a = rng.standard_normal(shape).astype(np.float32)
    b = round_trip(a)
    assert b.dtype == np.float32 and b.shape == a.shape
    assert np.array_equal(a, b)


def test_uint8_round_trip(rng):
    a = rng.integers(0, 256, (4, 9, 9), dtype=np.uint8)
    b = round_trip(a)
    assert b.dtype == np.uint8 and np.array_equal(a, b)


def test_bool_stored_as_uint8():
    a = np.array([[True, False], [False, True]])
    assert np.array_equal(round_trip(a), a.astype(np.uint8))


def test_float64_downcast():
    b = round_trip(np.array([0.1, 2.5]))
    assert b.dtype == np.float32 and b[1] == 2.5


def test_header_bytes():
    buf = io.BytesIO()
    tf.write_tensor(buf, np.zeros((2, 3), np.uint8))
    raw = buf.getvalue()
    assert raw[:4] == b"MVMT" and raw[4:7] == bytes([1, 1, 2])
    assert struct.unpack("<2I", raw[7:15]) == (2, 3) and len(raw) == 15 + 6


def test_unsupported_dtype():
    with pytest.raises(tf.TensorFileError):
        round_trip(np.array([-1, 300]))
    with pytest.raises(tf.TensorFileError):
        round_trip(np.array(["x"]))


def _record(arr):
    buf = io.BytesIO()
    tf.write_tensor(buf, arr)
    return bytearray(buf.getvalue())


def test_bad_magic():
    raw = _record(np.zeros(3, np.float32))
    raw[0:4] = b"NOPE"
    with pytest.raises(tf.TensorFileError, match="magic"):
        tf.read_tensor(io.BytesIO(bytes(raw)))


def test_unknown_version():
    raw = _record(np.zeros(3, np.float32))
    raw[4] = 2
    with pytest.raises(tf.TensorFileError, match="version"):
        tf.read_tensor(io.BytesIO(bytes(raw)))


def test_unknown_dtype_code():
    raw = _record(np.zeros(3, np.float32))
    raw[5] = 9
    with pytest.raises(tf.TensorFileError, match="dtype"):
        tf.read_tensor(io.BytesIO(bytes(raw)))


@pytest.mark.parametrize("cut", [2, 6, 9, 20])
def test_truncated(cut):
    raw = bytes(_record(np.arange(6, dtype=np.float32).reshape(2, 3)))
    with pytest.raises(tf.TensorFileError, match="truncated"):
        tf.read_tensor(io.BytesIO(raw[:cut]))


def test_archive_round_trip(tmp_path, rng):
    arrays = {
        "magnitude": rng.standard_normal((3, 1, 8, 8)).astype(np.float32),
        "mask": (rng.random((3, 8, 8)) < 0.5).astype(np.uint8),
        "naïve name": np.zeros(0, np.float32),
    }
    tf.save_archive(tmp_path / "a.mvmt", arrays)
    back = tf.load_archive(tmp_path / "a.mvmt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])


def test_archive_truncated(tmp_path):
    tf.save_archive(tmp_path / "a.mvmt", {"x": np.ones(4, np.float32)})
    raw = (tmp_path / "a.mvmt").read_bytes()
    (tmp_path / "b.mvmt").write_bytes(raw[:-3])
    with pytest.raises(tf.TensorFileError):
        tf.load_archive(tmp_path / "b.mvmt")
