"""Minimal binary PGM (P5) reader and writer.

Images are stored with ``maxval`` 65535 after clipping to [0, 1]; label maps
store the class index directly as the grey level with ``maxval`` 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def read(path) -> tuple[np.ndarray, int]:
    """Return the raw grey levels and ``maxval``."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise ValueError(f"{path}: raster is truncated")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def write(path, values: np.ndarray, maxval: int) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM holds a single 2D plane")
    if values.min() < 0 or values.max() > maxval:
        raise ValueError("grey levels out of range")
    h, w = values.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + values.astype(dtype).tobytes())


def read_image(path) -> np.ndarray:
    raw, maxval = read(path)
    return raw.astype(np.float64) / maxval


def write_image(path, image: np.ndarray) -> None:
    scaled = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 65535)
    write(path, scaled.astype(np.int64), 65535)


def read_label(path) -> np.ndarray:
    return read(path)[0]


def write_label(path, label: np.ndarray) -> None:
    write(path, np.asarray(label, dtype=np.int64), 255)
