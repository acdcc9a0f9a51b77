"""Netpbm (PGM/PPM) reading and writing plus simple exports."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def read_pnm(path) -> np.ndarray:
    """Read a P2/P5 (gray) or P3/P6 (RGB) file as ``(H, W)`` or ``(H, W, 3)`` uint8/uint16."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated netpbm header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    chans = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * chans
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        raw = data[pos + 1 : pos + 1 + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise ValueError(f"{path}: truncated pixel data")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    else:
        arr = np.array(data[pos:].split()[:count], dtype=np.int64)
        if arr.size < count:
            raise ValueError(f"{path}: truncated pixel data")
    arr = arr.reshape((h, w, 3) if chans == 3 else (h, w))
    return arr


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def to_network_input(img: np.ndarray) -> np.ndarray:
    """Pixel array to a normalised ``(1, C, H, W)`` float64 batch."""
    x = np.asarray(img, dtype=np.float64)
    scale = 65535.0 if x.max(initial=0) > 255 else 255.0
    # centred, then stretched to about unit spread so early layers see O(1) activations
    x = (x / scale - 0.5) * 4.0
    if x.ndim == 2:
        return x[None, None]
    return x.transpose(2, 0, 1)[None]


def density_to_pgm(grid: np.ndarray) -> np.ndarray:
    """Max-normalised 8-bit rendering of a density map."""
    peak = grid.max(initial=0.0)
    if peak <= 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.round(grid / peak * 255.0).astype(np.uint8)
