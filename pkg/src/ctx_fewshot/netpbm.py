"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pnm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError(f"write_pnm: expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"write_pnm: unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def _tokens(buf: bytes, count: int):
    pos, out = 0, []
    while len(out) < count:
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
            raise ValueError("read_pnm: truncated header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> np.ndarray:
    """Return an (H, W, C) uint8 array with C = 1 for PGM and 3 for PPM."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"read_pnm: {path} is not a binary PGM/PPM file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"read_pnm: {path} uses 16-bit samples")
    c = 1 if magic == b"P5" else 3
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * c, offset=offset)
    return raster.reshape(h, w, c).copy()
