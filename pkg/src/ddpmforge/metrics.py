"""Frechet distance between Gaussian fits of projected image features.

Features come from a fixed, seeded random linear projection of the flattened
pixels rather than a pretrained Inception network, so scores are only
comparable between image sets measured with the same projector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class FeatureProjector:
    matrix: np.ndarray  # (d_pixels, d_feat)
    seed: int

    @classmethod
    def create(cls, d_pixels: int, d_feat: int = 64, seed: int = 0) -> "FeatureProjector":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((d_pixels, d_feat)) / np.sqrt(d_pixels), seed)

    @property
    def d_pixels(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_feat(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def extract_features(images: np.ndarray, proj: FeatureProjector) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(images.shape[0], -1)
    if flat.shape[1] != proj.d_pixels:
        raise ValueError(f"images have {flat.shape[1]} values each, projector expects {proj.d_pixels}")
    return flat @ proj.matrix


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D (N, d) matrix")
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (n - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T), n)


def matrix_sqrt_psd(s: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below the numerical-rank cutoff ``n * eps * max|lambda|`` (the
    ``numpy.linalg.matrix_rank`` default) are set to 0.  Below it they are
    rounding noise, and the square root would blow that noise up to ~sqrt(eps).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if np.max(np.abs(s - s.T), initial=0.0) > SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    cutoff = len(vals) * np.finfo(np.float64).eps * np.max(np.abs(vals), initial=0.0)
    root = (vecs * np.sqrt(np.where(vals > cutoff, vals, 0.0))) @ vecs.T
    return 0.5 * (root + root.T)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    root_a = matrix_sqrt_psd(a.sigma)
    middle = root_a @ b.sigma @ root_a
    cross = matrix_sqrt_psd(0.5 * (middle + middle.T))
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fid(generated: np.ndarray, reference: np.ndarray, proj: FeatureProjector) -> float:
    """Frechet distance between two image batches under one projector."""
    if generated.shape[1:] != reference.shape[1:]:
        raise ValueError(f"image shapes differ: {generated.shape[1:]} vs {reference.shape[1:]}")
    return frechet_distance(
        gaussian_stats(extract_features(generated, proj)),
        gaussian_stats(extract_features(reference, proj)),
    )
