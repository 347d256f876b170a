"""FACKPT1 named-tensor container.

Layout: magic ``FACKPT1``, u32 tensor count, then per tensor a u16 name length,
the UTF-8 name and an FTNSR1 payload. Entry order is preserved.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .numerics.tensorio import FormatError, decode_tensor, encode_tensor

MAGIC = b"FACKPT1"


def encode_container(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, array in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(array))
    return b"".join(parts)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic at byte 0")
    pos = len(MAGIC)
    if pos + 4 > len(buf):
        raise FormatError(f"truncated checkpoint header at byte {pos}")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError(f"truncated name length at byte {pos}")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise FormatError(f"truncated name at byte {pos}")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        out[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"trailing bytes after checkpoint at byte {pos}")
    return out


def save_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_container(entries))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def with_prefix(prefix: str, entries: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in entries.items()}


def strip_prefix(prefix: str, entries: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = f"{prefix}/"
    return {k[len(head) :]: v for k, v in entries.items() if k.startswith(head)}
