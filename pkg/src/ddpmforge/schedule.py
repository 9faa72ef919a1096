"""Linear-beta DDPM noise schedule and the forward/reverse diffusion steps.

Timesteps are 1-based: ``alpha_bar[0] == 1`` stands for the clean image and
``t`` runs over ``1..T``.  Arrays are stored with that padding slot so they
can be indexed by ``t`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Per-step noise tables.

    ``beta[0]`` and ``alpha[0]`` are placeholders (0 and 1) so every table
    has length ``T + 1``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "Schedule":
        betas = np.asarray(betas, dtype=np.float64)
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.empty_like(alpha)
        alpha_bar[0] = 1.0
        for t in range(1, len(alpha)):
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(len(betas), beta, alpha, alpha_bar)

    def _check_t(self, t, lo: int = 1):
        t_arr = np.asarray(t)
        if t_arr.size == 0 or t_arr.min() < lo or t_arr.max() > self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")


def build_schedule(T: int = 200, beta_start: float = 5e-4, beta_end: float = 0.1) -> Schedule:
    """Linear betas from ``beta_start`` at t=1 to ``beta_end`` at t=T.

    The defaults are the usual 1e-4..0.02 over 1000 steps rescaled to 200, so
    alpha_bar[T] is about 3e-5 and x_T is effectively pure noise.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, T)
    return Schedule.from_betas(betas)


def _per_sample(coef: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-sample coefficient vector to broadcast over (B, ...)."""
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def forward_noise(x0: np.ndarray, t, noise: np.ndarray, s: Schedule) -> np.ndarray:
    """Closed-form q(x_t | x_0): ``sqrt(ab)*x0 + sqrt(1-ab)*noise``.

    ``t`` is an int or one int per leading-axis sample.
    """
    s._check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} differs from x0 shape {x0.shape}")
    ab = _per_sample(s.alpha_bar[np.asarray(t)], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predict_x0(x_t: np.ndarray, t, eps_hat: np.ndarray, s: Schedule, clip: bool = True) -> np.ndarray:
    s._check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if np.shape(eps_hat) != x_t.shape:
        raise ValueError(f"eps_hat shape {np.shape(eps_hat)} differs from x_t shape {x_t.shape}")
    ab = _per_sample(s.alpha_bar[np.asarray(t)], x_t.ndim)
    if np.any(ab == 0.0):
        raise ZeroDivisionError(f"alpha_bar is zero at timestep {t}")
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clip else x0


def posterior_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, s: Schedule) -> np.ndarray:
    s._check_t(t)
    coef = s.beta[t] / np.sqrt(1.0 - s.alpha_bar[t])
    return (x_t - coef * eps_hat) / np.sqrt(s.alpha[t])


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    s: Schedule,
    injected_noise: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with variance ``beta[t]``.

    At ``t == 1`` the injected noise is ignored and the mean is returned.
    """
    s._check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if np.shape(eps_hat) != x_t.shape:
        raise ValueError(f"eps_hat shape {np.shape(eps_hat)} differs from x_t shape {x_t.shape}")
    mean = posterior_mean(x_t, t, eps_hat, s)
    if t == 1 or injected_noise is None:
        return mean
    if np.shape(injected_noise) != x_t.shape:
        raise ValueError(f"injected noise shape {np.shape(injected_noise)} differs from {x_t.shape}")
    return mean + np.sqrt(s.beta[t]) * injected_noise
