import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpmforge.autodiff import Tensor
from ddpmforge.denoiser import DenoiserConfig, DenoiserParams, init_params
from ddpmforge.schedule import build_schedule
from ddpmforge.trainer import (
    EmaState,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    diffusion_loss,
    ema_update,
    train,
)

TINY = DenoiserConfig(image_size=4, channels=3, base_width=4, depth=1, embed_dim=4, num_classes=3)


def _scalar_params(value):
    return DenoiserParams(TINY, {"theta": np.array([float(value)])})


def _replay(seed, n, T, shape):
    """Re-draw t, eps and dropout uniforms in the documented order."""
    r = np.random.default_rng(seed)
    t = r.integers(1, T + 1, size=n)
    eps = r.standard_normal(shape)
    u = r.random(n)
    return t, eps, u


# --- diffusion_loss ----------------------------------------------------------------

def test_oracle_denoiser_gives_zero_loss():
    s = build_schedule(T=50)
    images = np.random.default_rng(0).uniform(-1, 1, (6, 3, 4, 4))
    labels = np.array([0, 1, 0, 1, 1, 0])
    _, true_eps, _ = _replay(21, 6, s.T, images.shape)
    seen = {}

    def oracle(params, x_t, t, cond, tensors):
        seen["t"] = t
        return Tensor(true_eps)

    loss = diffusion_loss(init_params(TINY, 0), (images, labels), s, np.random.default_rng(21), 0.1,
                          denoise_fn=oracle)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(seen["t"], _replay(21, 6, s.T, images.shape)[0])


def test_zero_network_loss_is_mean_squared_noise():
    cfg = DenoiserConfig()
    s = build_schedule()
    n = 64
    images = np.random.default_rng(1).uniform(-1, 1, (n, 3, 16, 16))
    labels = np.arange(n) % 8
    loss = diffusion_loss(init_params(cfg, 0), (images, labels), s, np.random.default_rng(5), 0.1).item()
    _, eps, _ = _replay(5, n, s.T, images.shape)
    assert loss == pytest.approx(np.mean(eps**2), rel=1e-14)
    standard_error = math.sqrt(2.0 / eps.size)  # Var(eps^2) = 2
    assert abs(loss - 1.0) < 3 * standard_error


@pytest.mark.parametrize("p_uncond", [0.0, 0.5, 1.0])
def test_conditioning_dropout(p_uncond):
    s = build_schedule(T=10)
    n = 200
    images = np.zeros((n, 3, 4, 4))
    labels = np.arange(n) % 2
    seen = {}

    def spy(params, x_t, t, cond, tensors):
        seen["cond"] = np.asarray(cond)
        return Tensor(np.zeros(x_t.shape))

    diffusion_loss(init_params(TINY, 0), (images, labels), s, np.random.default_rng(3), p_uncond, denoise_fn=spy)
    _, _, u = _replay(3, n, s.T, images.shape)
    expected = np.where(u < p_uncond, TINY.null_class, labels)
    np.testing.assert_array_equal(seen["cond"], expected)
    if p_uncond == 1.0:
        assert np.all(seen["cond"] == TINY.null_class)
    if p_uncond == 0.0:
        np.testing.assert_array_equal(seen["cond"], labels)


def test_loss_rejects_bad_batches():
    s = build_schedule(T=10)
    p = init_params(TINY, 0)
    with pytest.raises(ValueError, match="empty"):
        diffusion_loss(p, (np.zeros((0, 3, 4, 4)), np.zeros(0)), s, np.random.default_rng(0), 0.1)
    with pytest.raises(ValueError):
        diffusion_loss(p, (np.zeros((2, 3, 4, 4)), np.zeros(3)), s, np.random.default_rng(0), 0.1)


# --- AdamW ---------------------------------------------------------------------------

def test_adamw_zero_gradient_only_decays():
    p = _scalar_params(1.0)
    adamw_step(p, {"theta": np.zeros(1)}, OptimizerState.zeros_like(p),
               TrainConfig(learning_rate=0.1, weight_decay=0.1))
    assert p["theta"][0] == pytest.approx(0.99, abs=1e-15)


def test_adamw_first_step_is_lr_sized():
    p = _scalar_params(0.0)
    state = OptimizerState.zeros_like(p)
    adamw_step(p, {"theta": np.array([5.0])}, state, TrainConfig(learning_rate=0.001, weight_decay=0.0))
    assert p["theta"][0] == pytest.approx(-0.001 * 5.0 / (5.0 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adamw_minimises_a_quadratic():
    p = _scalar_params(1.0)
    state = OptimizerState.zeros_like(p)
    cfg = TrainConfig(learning_rate=0.05)
    for _ in range(100):
        adamw_step(p, {"theta": 2.0 * p["theta"]}, state, cfg)
    assert abs(p["theta"][0]) < 1.0


def _adam_oracle(theta, grads, lr, b1, b2, eps):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
    return theta


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_adamw_without_decay_is_adam(theta0, grads):
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
    p = _scalar_params(theta0)
    state = OptimizerState.zeros_like(p)
    for g in grads:
        adamw_step(p, {"theta": np.array([g])}, state, cfg)
    want = _adam_oracle(theta0, grads, 1e-2, 0.9, 0.999, 1e-8)
    assert abs(p["theta"][0] - want) <= 1e-12


def test_adamw_rejects_bad_gradients():
    p = _scalar_params(1.0)
    state = OptimizerState.zeros_like(p)
    with pytest.raises(ValueError, match="theta"):
        adamw_step(p, {"theta": np.array([np.nan])}, state, TrainConfig())
    with pytest.raises(ValueError, match="aligned"):
        adamw_step(p, {"other": np.zeros(1)}, state, TrainConfig())
    assert p["theta"][0] == 1.0 and state.step == 0


# --- EMA -----------------------------------------------------------------------------

@pytest.mark.parametrize("alpha,expected", [(1.0, 1.0), (0.0, 2.0), (0.9, 1.1)])
def test_ema_examples(alpha, expected):
    ema = EmaState(_scalar_params(1.0), alpha)
    ema_update(ema, _scalar_params(2.0))
    assert ema.shadow["theta"][0] == pytest.approx(expected, abs=1e-15)


def test_ema_alpha_zero_copies_exactly():
    ema = EmaState(_scalar_params(1.0), 0.0)
    ema_update(ema, _scalar_params(0.1234567))
    assert ema.shadow["theta"][0] == 0.1234567


def test_ema_rejects_misaligned():
    with pytest.raises(ValueError):
        ema_update(EmaState(_scalar_params(1.0), 0.5), DenoiserParams(TINY, {"other": np.zeros(1)}))
    with pytest.raises(ValueError):
        ema_update(EmaState(_scalar_params(1.0), 0.5), DenoiserParams(TINY, {"theta": np.zeros(2)}))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(-5, 5), st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_ema_stays_in_convex_envelope(alpha, start, thetas):
    ema = EmaState(_scalar_params(start), alpha)
    lo = hi = start
    for value in thetas:
        ema_update(ema, _scalar_params(value))
        lo, hi = min(lo, value), max(hi, value)
        s = ema.shadow["theta"][0]
        assert lo - 1e-12 <= s <= hi + 1e-12


# --- train ---------------------------------------------------------------------------

def _tiny_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, 3, 4, 4)), np.arange(n) % 2


def test_zero_epochs_returns_init():
    result = train(TrainConfig(epochs=0, seed=4), _tiny_data(), TINY, build_schedule(T=10))
    assert result.params.equals(init_params(TINY, 4))
    assert result.ema.shadow.equals(init_params(TINY, 4))
    assert result.losses == []


def test_training_is_reproducible():
    cfg = TrainConfig(epochs=2, batch_size=5, learning_rate=1e-3, seed=1)
    a = train(cfg, _tiny_data(), TINY, build_schedule(T=10))
    b = train(cfg, _tiny_data(), TINY, build_schedule(T=10))
    assert a.losses == b.losses
    assert a.params.equals(b.params)
    assert a.ema.shadow.equals(b.ema.shadow)
    assert a.steps_per_epoch == 3 and a.step_count == 6
    c = train(dataclasses.replace(cfg, seed=2), _tiny_data(), TINY, build_schedule(T=10))
    assert a.losses != c.losses


def test_training_moves_params_and_ema_lags():
    cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-2, ema_alpha=0.9, seed=0)
    result = train(cfg, _tiny_data(), TINY, build_schedule(T=10))
    init = init_params(TINY, 0)
    assert not result.params.equals(init)
    d_params = sum(np.sum((result.params[k] - init[k]) ** 2) for k in init.names())
    d_ema = sum(np.sum((result.ema.shadow[k] - init[k]) ** 2) for k in init.names())
    assert 0 < d_ema < d_params


def test_training_loss_decreases_on_tiny_problem():
    cfg = TrainConfig(epochs=40, batch_size=8, learning_rate=3e-3, seed=0)
    result = train(cfg, _tiny_data(16), TINY, build_schedule(T=20))
    means = result.epoch_means()
    assert np.mean(means[-5:]) < np.mean(means[:5])


def test_non_finite_loss_aborts_with_batch_index():
    images, labels = _tiny_data()
    images[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(TrainConfig(epochs=1, batch_size=4), (images, labels), TINY, build_schedule(T=10))
    assert info.value.batch_index == 0
    assert "batch 0" in str(info.value)


def test_train_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1), (np.zeros((0, 3, 4, 4)), np.zeros(0, int)), TINY)
    with pytest.raises(ValueError, match="null"):
        train(TrainConfig(epochs=1), (np.zeros((2, 3, 4, 4)), np.array([0, 2])), TINY)
    for bad in (dict(p_uncond=1.5), dict(ema_alpha=-0.1), dict(learning_rate=0.0), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
