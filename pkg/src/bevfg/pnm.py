"""Binary netpbm (P5/P6) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IoError


def _header(kind: str, width: int, height: int, maxval: int) -> bytes:
    return f"{kind}\n{width} {height}\n{maxval}\n".encode("ascii")


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 uint8 image as P6."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM data must be uint8 H x W x 3")
    h, w, _ = rgb.shape
    _write(path, _header("P6", w, h, 255) + rgb.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Write an H x W uint8 or uint16 image as P5 (16-bit samples big-endian)."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype not in (np.uint8, np.uint16):
        raise ValueError("PGM data must be a 2-d uint8 or uint16 array")
    h, w = img.shape
    maxval = 255 if img.dtype == np.uint8 else 65535
    body = img.astype(">u2").tobytes() if img.dtype == np.uint16 else img.tobytes()
    _write(path, _header("P5", w, h, maxval) + body)


def _write(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos].decode("ascii"))
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    (kind, w, h, maxval), pos = _tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    chans = {"P5": 1, "P6": 3}.get(kind)
    if chans is None:
        raise IoError(f"{path}: unsupported netpbm type {kind}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * chans
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    if chans == 3:
        return data.reshape(h, w, 3).copy()
    return data.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)
