"""
Noise-prediction training: MSE loss with conditioning dropout, AdamW, and an
exponential moving average of the weights updated after every batch.

All randomness flows from one ``numpy.random.Generator`` seeded with
``TrainConfig.seed``.  Draw order:

    per epoch:  permutation of the dataset
    per batch:  timesteps (integers in [1, T]), then noise (standard normal,
                batch shape), then dropout (uniform, one per sample)

Parameter initialisation uses its own generator seeded with the same seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .denoiser import DenoiserConfig, DenoiserParams, as_tensors, denoiser_forward, init_params
from .schedule import Schedule, build_schedule, forward_noise

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    ema_alpha: float = 0.995
    p_uncond: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if self.weight_decay < 0 or self.adam_epsilon <= 0:
            raise ValueError("weight_decay must be >= 0 and adam_epsilon > 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite loss {loss} at batch {batch_index}")
        self.batch_index = batch_index


@dataclass
class EmaState:
    shadow: DenoiserParams
    alpha: float


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: DenoiserParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
        )


@dataclass
class TrainResult:
    params: DenoiserParams
    ema: EmaState
    losses: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    @property
    def step_count(self) -> int:
        return len(self.losses)

    def epoch_means(self) -> list[float]:
        n = self.steps_per_epoch
        if not n:
            return []
        return [float(np.mean(self.losses[i : i + n])) for i in range(0, len(self.losses), n)]


DenoiseFn = Callable[[DenoiserParams, Tensor, np.ndarray, np.ndarray, dict | None], Tensor]


def _default_denoise(params, x_t, t, cond, tensors):
    return denoiser_forward(params, x_t, t, cond, tensors=tensors)


def diffusion_loss(
    params: DenoiserParams,
    batch: tuple[np.ndarray, np.ndarray],
    s: Schedule,
    rng: np.random.Generator,
    p_uncond: float,
    tensors: dict | None = None,
    denoise_fn: DenoiseFn = _default_denoise,
) -> Tensor:
    """Mean squared error between predicted and true noise for one batch."""
    images, labels = batch
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")

    t = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal(images.shape)
    drop = rng.random(n) < p_uncond
    cond = np.where(drop, params.config.null_class, labels)

    x_t = forward_noise(images, t, eps, s)
    pred = denoise_fn(params, Tensor(x_t), t, cond, tensors)
    diff = ad.add(pred, Tensor(-eps))
    return ad.scale(ad.sum_(ad.mul(diff, diff)), 1.0 / diff.size)


def adamw_step(
    params: DenoiserParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
) -> tuple[DenoiserParams, OptimizerState]:
    """One decoupled-weight-decay Adam update, applied in place."""
    if set(grads) != set(params.names()):
        raise ValueError("gradients are not aligned with parameters")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr, wd, eps = cfg.learning_rate, cfg.weight_decay, cfg.adam_epsilon
    for name, theta in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * theta
        theta -= lr * update
    return params, state


def ema_update(ema: EmaState, params: DenoiserParams) -> EmaState:
    """``shadow <- alpha * shadow + (1 - alpha) * params``, in place."""
    if ema.shadow.names() != params.names():
        raise ValueError("EMA shadow and parameters have different names")
    a = ema.alpha
    for name, theta in params.items():
        s = ema.shadow.arrays[name]
        if s.shape != theta.shape:
            raise ValueError(f"shape mismatch for {name!r}: {s.shape} vs {theta.shape}")
        s *= a
        s += (1.0 - a) * theta
    return ema


def train(
    config: TrainConfig,
    dataset: tuple[np.ndarray, np.ndarray],
    denoiser_config: DenoiserConfig,
    schedule: Schedule | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train from a seeded initialisation.

    ``dataset`` is ``(images, labels)`` with images already normalised to
    [-1, 1] in (N, C, H, W) layout.
    """
    images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    if labels.max() >= denoiser_config.null_class:
        raise ValueError("dataset labels collide with the null class index")
    schedule = schedule or build_schedule()

    params = init_params(denoiser_config, config.seed)
    ema = EmaState(params.copy(), config.ema_alpha)
    opt = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    result = TrainResult(params, ema, [], steps_per_epoch)

    batch_index = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            tensors = as_tensors(params)
            with Tape() as tape:
                loss = diffusion_loss(params, (images[idx], labels[idx]), schedule, rng,
                                      config.p_uncond, tensors=tensors)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(batch_index, value)
            ad.backward(loss, tape)
            grads = {k: tape.grad(tensors[k]) for k in params.names()}
            adamw_step(params, grads, opt, config)
            ema_update(ema, params)
            result.losses.append(value)
            batch_index += 1
        mean = float(np.mean(result.losses[-steps_per_epoch:]))
        logger.info("epoch %d/%d mean loss %.5f", epoch + 1, config.epochs, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return result
