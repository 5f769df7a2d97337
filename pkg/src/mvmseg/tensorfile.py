"""Binary array container ("MVMT").

Record layout (little-endian)::

    b"MVMT" | version u8 (=1) | dtype u8 (0=float32, 1=uint8) | rank u8
    | extents u32 * rank | row-major payload

An archive is a sequence of ``name_len u32 | UTF-8 name | record`` entries.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"MVMT"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class TensorFileError(ValueError):
    pass


def _coerce(arr) -> tuple[int, np.ndarray]:
    a = np.asarray(arr)
    # asarray with order="C" keeps 0-d arrays 0-d, unlike ascontiguousarray
    if a.dtype == np.bool_ or a.dtype == np.uint8:
        return 1, np.asarray(a, dtype=np.uint8, order="C")
    if a.dtype.kind == "f":
        return 0, np.asarray(a, dtype="<f4", order="C")
    if a.dtype.kind in "iu" and (a.size == 0 or (a.min() >= 0 and a.max() <= 255)):
        return 1, np.asarray(a, dtype=np.uint8, order="C")
    raise TensorFileError(f"cannot store dtype {a.dtype}; only float32 and uint8 are supported")


def write_tensor(fh: BinaryIO, arr) -> None:
    code, a = _coerce(arr)
    if a.ndim > 255:
        raise TensorFileError("rank too large")
    fh.write(MAGIC + struct.pack("<BBB", VERSION, code, a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFileError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise TensorFileError("bad magic; not an MVMT record")
    version, code, rank = struct.unpack("<BBB", _read_exact(fh, 3))
    if version != VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    if code not in _CODES:
        raise TensorFileError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    dt = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    out: dict[str, np.ndarray] = {}
    while fh.tell() < len(data):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, n).decode("utf-8")
        out[name] = read_tensor(fh)
    return out
