"""Flat binary parameter container.

Layout (little-endian)::

    b"RQDT"  u8 version  u32 count
    count x { u16 name_len, name (utf-8), u8 ndim, ndim x u32 dims, f32 data }
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"RQDT"
VERSION = 1


class FormatError(ValueError):
    pass


def dump_arrays(arrays: dict[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<BI", VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_arrays(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<BI", _read(fh, 5))
    if version != VERSION:
        raise FormatError(f"parameter container version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read(fh, 2))
        name = _read(fh, n).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read(fh, 1))
        shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(_read(fh, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated parameter container")
    return buf


def to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    dump_arrays(arrays, buf)
    return buf.getvalue()


def from_bytes(data: bytes) -> dict[str, np.ndarray]:
    return load_arrays(io.BytesIO(data))


def save_params(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        dump_arrays(arrays, fh)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load_arrays(fh)
