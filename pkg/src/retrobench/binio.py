"""Little-endian binary format helpers shared by the persistence layers."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a persisted artifact does not match its declared format."""


def write_magic(fh: BinaryIO, magic: bytes) -> None:
    assert len(magic) == 4
    fh.write(magic)


def expect_magic(fh: BinaryIO, magic: bytes) -> None:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated: expected 4-byte u32")
    return struct.unpack("<I", raw)[0]


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def read_u64(fh: BinaryIO) -> int:
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError("truncated: expected 8-byte u64")
    return struct.unpack("<Q", raw)[0]


def write_f64(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<d", value))


def read_f64(fh: BinaryIO) -> float:
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError("truncated: expected 8-byte f64")
    return struct.unpack("<d", raw)[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated: string payload")
    return raw.decode("utf-8")


def write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_array(fh: BinaryIO, count: int, dtype: str) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError("truncated: array payload")
    return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype), copy=True)
