"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np

from .errors import DataError


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    with open(path, "wb") as fh:
        fh.write(_header(b"P6", rgb.shape[1], rgb.shape[0]))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise DataError(f"PGM needs an (H, W) uint8 array, got {gray.shape} {gray.dtype}")
    with open(path, "wb") as fh:
        fh.write(_header(b"P5", gray.shape[1], gray.shape[0]))
        fh.write(np.ascontiguousarray(gray).tobytes())


def _read_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a P5 or P6 file; returns (H, W) or (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        (magic, w, h, maxval), offset = _read_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{os.fspath(path)}: malformed PNM header") from exc
    if maxval != 255:
        raise DataError(f"{os.fspath(path)}: only maxval 255 is supported, got {maxval}")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise DataError(f"{os.fspath(path)}: unsupported PNM magic {magic!r}")
    raster = buf[offset:offset + w * h * channels]
    if len(raster) != w * h * channels:
        raise DataError(f"{os.fspath(path)}: truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)
