"""FTNSR1 tensor serialization.

Layout: 6-byte magic ``FTNSR1``, u8 rank, rank x u32 little-endian extents,
then row-major little-endian float32 values.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"FTNSR1"


class FormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 6] != MAGIC:
        raise FormatError(f"bad tensor magic at byte {offset}")
    pos = offset + 6
    if pos >= len(buf):
        raise FormatError(f"truncated tensor header at byte {pos}")
    rank = buf[pos]
    pos += 1
    if pos + 4 * rank > len(buf):
        raise FormatError(f"truncated tensor extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError(f"truncated tensor payload at byte {pos}: need {4 * count} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return data, end


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"trailing bytes after tensor at byte {end}")
    return array


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    fh.write(encode_tensor(array))
