"""Binary PPM (P6) image output."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(pixels: np.ndarray) -> bytes:
    """Encode (3, H, W) values in [0, 1]; each byte is round-half-up(v * 255)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixels, got {pixels.shape}")
    if np.any(~np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    _, h, w = pixels.shape
    data = np.floor(pixels * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.transpose(1, 2, 0).tobytes()


def write_image(pixels: np.ndarray, path) -> None:
    Path(path).write_bytes(to_bytes(pixels))


def read_image(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_image` back to (3, H, W) in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P6 file with maxval 255")
    w, h = (int(v) for v in parts[1].split())
    body = np.frombuffer(parts[3], dtype=np.uint8)
    if body.size != 3 * w * h:
        raise ValueError(f"{path}: expected {3 * w * h} pixel bytes, found {body.size}")
    return body.reshape(h, w, 3).transpose(2, 0, 1) / 255.0
