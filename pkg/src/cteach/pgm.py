"""Binary PGM (P5) export for label maps and attention weights."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary P5, max value 255, row-major."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise DataError(f"PGM expects a 2-d map, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise DataError("gray values outside [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise DataError(f"{path}: not a binary P5 file")
    w, h = (int(x) for x in parts[1].split())
    data = parts[3]
    if len(data) != h * w:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def labels_to_gray(labels: np.ndarray, background: int | None = None) -> np.ndarray:
    """Spread label ids over evenly spaced gray levels (background -> 0)."""
    uniq = [u for u in np.unique(labels) if u != background]
    levels = {u: int(round((i + 1) * 255 / max(len(uniq), 1))) for i, u in enumerate(uniq)}
    if background is not None:
        levels[background] = 0
    out = np.zeros(labels.shape, dtype=np.uint8)
    for u, lv in levels.items():
        out[labels == u] = lv
    return out


def weights_to_gray(weights: np.ndarray) -> np.ndarray:
    """Normalize nonnegative weights to the full gray range."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi - lo < 1e-15:
        return np.zeros(w.shape, dtype=np.uint8)
    return np.round((w - lo) / (hi - lo) * 255).astype(np.uint8)
