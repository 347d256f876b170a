"""Binary PPM (P6) and PGM (P5) codecs, 8-bit only."""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim == 2:
        magic, h, w = b"P5", *array.shape
    elif array.ndim == 3 and array.shape[2] == 3:
        magic, h, w = b"P6", array.shape[0], array.shape[1]
    else:
        raise ValueError(f"expected [h,w] or [h,w,3], got shape {array.shape}")
    if array.size and (array.min() < 0 or array.max() > 255):
        raise ValueError("values must fit in 8 bits")
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(array, dtype=np.uint8).tobytes()


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise NetpbmError("unexpected end of header", start)
    return buf[start:pos], pos


def decode(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic {magic!r}", 0)
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise NetpbmError(f"malformed {what} {tok!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise NetpbmError(f"degenerate dimensions {w}x{h}", 2)
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise NetpbmError("missing whitespace after header", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise NetpbmError(f"truncated raster: need {need} bytes, have {len(buf) - pos}", pos)
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
