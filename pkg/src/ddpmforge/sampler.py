"""Ancestral sampling with classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserParams, denoiser_forward
from .schedule import Schedule, reverse_step


@dataclass(frozen=True)
class SampleRequest:
    class_index: int
    guidance_scale: float = 3.0
    count: int = 1
    seed: int = 0
    use_ema: bool = False

    def __post_init__(self):
        if not math.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be finite and >= 0, got {self.guidance_scale}")
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.class_index < 0:
            raise ValueError("class_index must be non-negative")


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided noise estimate ``eps_cond + w * (eps_cond - eps_uncond)``."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    if not math.isfinite(w):
        raise ValueError("guidance scale must be finite")
    return eps_cond + w * (eps_cond - eps_uncond)


def sample(
    params: DenoiserParams,
    schedule: Schedule,
    request: SampleRequest,
    ema_params: DenoiserParams | None = None,
    cond_only: bool = False,
) -> np.ndarray:
    """Draw ``request.count`` images in [-1, 1].

    RNG draw order: x_T first, then one injected-noise array for each of
    t = T..2.  The stream depends only on ``request.seed`` and the image
    shape, so raw and EMA weights see the same noise trajectory.
    ``cond_only`` skips the unconditional pass entirely (only meaningful at
    guidance scale 0, where it gives the same result).
    """
    config = params.config
    if request.class_index >= config.null_class:
        raise ValueError(
            f"class {request.class_index} is not a real class (null index is {config.null_class})"
        )
    if request.use_ema:
        if ema_params is None:
            raise ValueError("use_ema requested but no EMA parameters given")
        weights = ema_params
    else:
        weights = params

    rng = np.random.default_rng(request.seed)
    shape = (request.count, config.channels, config.image_size, config.image_size)
    x = rng.standard_normal(shape)
    cond = np.full(request.count, request.class_index)
    null = np.full(request.count, config.null_class)
    w = request.guidance_scale
    for t in range(schedule.T, 0, -1):
        ts = np.full(request.count, t)
        eps_c = denoiser_forward(weights, x, ts, cond).data
        if cond_only:
            eps = eps_c
        else:
            eps_u = denoiser_forward(weights, x, ts, null).data
            eps = cfg_combine(eps_c, eps_u, w)
        noise = rng.standard_normal(shape) if t > 1 else None
        x = reverse_step(x, t, eps, schedule, noise)
    return np.clip(x, -1.0, 1.0)
