"""Procedural labelled shape images and the resize/normalise pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (shape, RGB) per class; shapes and hues both differ between classes
TEMPLATES: list[tuple[str, tuple[float, float, float]]] = [
    ("circle", (0.90, 0.15, 0.15)),
    ("square", (0.15, 0.75, 0.20)),
    ("triangle", (0.20, 0.30, 0.95)),
    ("cross", (0.95, 0.85, 0.10)),
    ("ring", (0.85, 0.20, 0.85)),
    ("diamond", (0.10, 0.85, 0.85)),
    ("hbar", (0.95, 0.55, 0.10)),
    ("vbar", (0.55, 0.25, 0.05)),
    ("x", (0.95, 0.95, 0.95)),
    ("frame", (0.40, 0.95, 0.50)),
]

# pixels live on a 1/256 grid so normalise/denormalise round-trips exactly
LEVELS = 256


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    label: int


def _mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask in shape-local coordinates where the shape spans [-1, 1]."""
    au, av = np.abs(u), np.abs(v)
    if kind == "circle":
        return u**2 + v**2 <= 1.0
    if kind == "square":
        return np.maximum(au, av) <= 0.8
    if kind == "triangle":
        # apex up, base at v = 0.8
        return (v <= 0.8) & (v >= -0.9) & (au <= (v + 0.9) * 0.6)
    if kind == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if kind == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.35)
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "hbar":
        return (av <= 0.35) & (au <= 1.0)
    if kind == "vbar":
        return (au <= 0.35) & (av <= 1.0)
    if kind == "x":
        inside = (au <= 1.0) & (av <= 1.0)
        return inside & ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4))
    if kind == "frame":
        m = np.maximum(au, av)
        return (m <= 0.95) & (m >= 0.6)
    raise ValueError(f"unknown shape {kind!r}")


def render(kind: str, color, size: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered sample: position, scale, and background tint vary."""
    center = size / 2.0 + rng.uniform(-0.1, 0.1, size=2) * size
    radius = size * 0.32 * rng.uniform(0.85, 1.15)
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    v = (rows - center[0]) / radius
    u = (cols - center[1]) / radius
    mask = _mask(kind, u, v)
    background = np.clip(0.12 + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
    img = np.where(mask[None], np.asarray(color)[:, None, None], background[:, None, None])
    return np.round(img * LEVELS) / LEVELS


def generate_dataset(num_classes: int = 8, per_class: int = 256, size: int = 16, seed: int = 0) -> list[LabeledImage]:
    """Class-major list of ``num_classes * per_class`` images.

    Sample ``i`` of class ``k`` uses its own generator seeded with
    ``(seed, k, i)``, so generation order does not matter.
    """
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be positive")
    if num_classes > len(TEMPLATES):
        raise ValueError(f"only {len(TEMPLATES)} class templates available, asked for {num_classes}")
    if size < 8:
        raise ValueError("size must be at least 8")
    out = []
    for k in range(num_classes):
        kind, color = TEMPLATES[k]
        for i in range(per_class):
            rng = np.random.default_rng([seed, k, i])
            out.append(LabeledImage(render(kind, color, size, rng), k))
    return out


def resize_nearest(pixels: np.ndarray, target: int) -> np.ndarray:
    c, h, w = pixels.shape
    rows = (np.arange(target) * h) // target
    cols = (np.arange(target) * w) // target
    return pixels[:, rows[:, None], cols[None, :]]


def preprocess(image: LabeledImage | np.ndarray, target_size: int) -> np.ndarray:
    """Nearest-neighbour resize, then map [0, 1] to [-1, 1]."""
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float64)
    if pixels.size == 0:
        raise ValueError("empty image")
    if target_size < 1:
        raise ValueError("target_size must be positive")
    return (resize_nearest(pixels, target_size) - 0.5) / 0.5


def denormalize(t: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(t, dtype=np.float64) * 0.5 + 0.5, 0.0, 1.0)


def to_arrays(images: list[LabeledImage], target_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack preprocessed images and labels for training."""
    x = np.stack([preprocess(im, target_size) for im in images])
    y = np.array([im.label for im in images], dtype=np.int64)
    return x, y


def class_means(pixels: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class mean image, (K, C, H, W), in whatever range ``pixels`` use."""
    return np.stack([pixels[labels == k].mean(axis=0) for k in range(num_classes)])


def rms_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))
