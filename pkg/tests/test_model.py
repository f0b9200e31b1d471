import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfgp import autodiff as ad
from dfgp.autodiff import Tensor
from dfgp.data import SynthConfig, split_train_eval, synth_generate
from dfgp.errors import ConfigError, DomainError, UnknownSeriesError
from dfgp.factors import global_factors
from dfgp.model import (
    AdamState,
    ModelConfig,
    adam_step,
    batch_loss,
    forecast,
    gaussian_quantile,
    init_model_params,
    loadings,
    total_nll,
    train,
)

TINY = dict(n_factors=2, hidden_dim=4, train_window=24, horizon=6)


def tiny_split(N=3, T=30, seed=0, W=24, tau=6):
    ds, _ = synth_generate(SynthConfig(n_series=N, length=T, seed=seed))
    return split_train_eval(ds, W, tau)


def dense_series_nll(r, x, a, ell, sigma):
    K = a * a * np.exp(-((x[:, None] - x[None, :]) ** 2) / (2 * ell * ell)) + sigma * sigma * np.eye(x.size)
    return 0.5 * r @ np.linalg.inv(K) @ r + 0.5 * np.linalg.slogdet(K)[1] + 0.5 * x.size * math.log(2 * math.pi)


# --- config ---------------------------------------------------------------


def test_config_defaults_and_batching():
    c = ModelConfig()
    assert (c.n_factors, c.hidden_dim, c.learning_rate, c.epochs, c.clip_norm) == (10, 50, 0.01, 2000, 10.0)
    assert c.batch_size_for(20) == 20 and c.batch_size_for(370) == 64
    assert ModelConfig(batch_size=8).batch_size_for(5) == 5


@pytest.mark.parametrize(
    "kwargs",
    [dict(horizon=0), dict(n_factors=0), dict(learning_rate=0.0), dict(quantiles=(0.5, 0.1)),
     dict(quantiles=(0.0, 0.5)), dict(features=("weekday",)), dict(init_noise=-1.0), dict(epochs=-1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


# --- loss -----------------------------------------------------------------


def test_zero_residual_unit_noise_loss():
    cfg = ModelConfig(**TINY, init_amplitude=1e-8, init_noise=1.0)
    params = init_model_params(cfg, ["a"], 4)
    X = np.random.default_rng(0).normal(size=(10, 4))
    with ad.no_grad():
        F = ad.matmul(loadings(params, [0]), global_factors(X, params.lstm, params.projection)).data
        loss = batch_loss(params, X, F, [0]).item()
    assert loss == pytest.approx(5 * math.log(2 * math.pi), abs=1e-10)


def test_loss_is_additive_over_series():
    sp = tiny_split(N=4)
    params = init_model_params(ModelConfig(**TINY), sp.series_ids, 4)
    X, z = sp.covariates[:24], sp.train_values
    with ad.no_grad():
        whole = batch_loss(params, X, z, [0, 1, 2, 3]).item()
        parts = batch_loss(params, X, z[:2], [0, 1]).item() + batch_loss(params, X, z[2:], [2, 3]).item()
    assert whole == pytest.approx(parts, rel=1e-13)


def test_loss_matches_dense_oracle(rng):
    sp = tiny_split(N=3, seed=4)
    params = init_model_params(ModelConfig(**TINY), sp.series_ids, 4)
    params.kernel.log_amplitude.data = rng.uniform(-1, 0.5, 3)
    params.kernel.log_lengthscale.data = rng.uniform(-3, -0.5, 3)
    params.kernel.log_noise.data = rng.uniform(-2, 0, 3)
    X, z = sp.covariates[:24], sp.train_values
    with ad.no_grad():
        got = batch_loss(params, X, z, [0, 1, 2]).item()
        F = ad.matmul(params.embeddings.W, global_factors(X, params.lstm, params.projection)).data
    x = np.arange(1, 25) / 24.0
    oracle = sum(
        dense_series_nll(z[i] - F[i], x, *np.exp([params.kernel.log_amplitude.data[i],
                                                   params.kernel.log_lengthscale.data[i],
                                                   params.kernel.log_noise.data[i]]))
        for i in range(3)
    )
    assert abs(got - oracle) < 1e-8


def test_threaded_loss_is_bit_identical(monkeypatch):
    sp = tiny_split(N=5)
    params = init_model_params(ModelConfig(**TINY), sp.series_ids, 4)
    X, z = sp.covariates[:24], sp.train_values
    with ad.no_grad():
        serial = batch_loss(params, X, z, range(5)).item()
        monkeypatch.setenv("DFGP_THREADS", "3")
        threaded = batch_loss(params, X, z, range(5)).item()
    assert serial == threaded


def test_softmax_loadings_rows_sum_to_one():
    params = init_model_params(ModelConfig(**TINY, softmax_loadings=True), ["a", "b"], 4)
    w = loadings(params, [0, 1]).numpy()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-15)
    assert np.all(w > 0)


# --- optimizer ------------------------------------------------------------


def test_adam_first_step_magnitude():
    x = Tensor([0.5], requires_grad=True)
    applied, norm = adam_step({"x": x}, {"x": np.array([1.0])}, AdamState(), lr=1e-3)
    assert applied and norm == 1.0
    assert x.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_adam_zero_gradient_leaves_params():
    x = Tensor([0.5, -2.0], requires_grad=True)
    adam_step({"x": x}, {"x": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(x.data, [0.5, -2.0])


def test_adam_solves_quadratic():
    x = Tensor([1.0], requires_grad=True)
    state = AdamState()
    for _ in range(100):
        adam_step({"x": x}, {"x": 2.0 * x.data}, state, lr=0.1)
    assert abs(x.data[0]) < 0.1


def test_adam_matches_reference_update(rng):
    p0, grads = rng.normal(size=4), [rng.normal(size=4) for _ in range(3)]
    x = Tensor(p0, requires_grad=True)
    state = AdamState()
    m = v = np.zeros(4)
    ref = p0.copy()
    for t, g in enumerate(grads, start=1):
        adam_step({"x": x}, {"x": g}, state, lr=0.05, clip_norm=1e9)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(x.data, ref, rtol=1e-14)


def test_adam_clips_by_global_norm():
    a, b = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
    s1, s2 = AdamState(), AdamState()
    adam_step({"a": a, "b": b}, {"a": np.array([30.0]), "b": np.array([40.0])}, s1, lr=0.1, clip_norm=10.0)
    np.testing.assert_allclose(s1.m["a"], 0.1 * 6.0)
    np.testing.assert_allclose(s1.m["b"], 0.1 * 8.0)
    assert s1.step == 1 and s2.step == 0


def test_adam_skips_non_finite(caplog):
    x = Tensor([1.0], requires_grad=True)
    state = AdamState()
    applied, _ = adam_step({"x": x}, {"x": np.array([np.nan])}, state, lr=0.1)
    assert not applied and state.step == 0 and x.data[0] == 1.0
    assert "skipped" in caplog.text


# --- training -------------------------------------------------------------


def test_zero_epochs_returns_initial_params():
    sp = tiny_split()
    cfg = ModelConfig(**TINY, epochs=0)
    params, hist = train(sp, cfg)
    init = init_model_params(cfg, sp.series_ids, 4)
    assert len(hist) == 0
    for (k, a), b in zip(params.named_tensors().items(), init.named_tensors().values()):
        assert a.data.tobytes() == b.data.tobytes(), k


def test_training_is_deterministic_and_reduces_nll():
    sp = tiny_split(N=4, T=60, W=48, tau=12)
    cfg = ModelConfig(n_factors=2, hidden_dim=4, train_window=48, horizon=12, epochs=40, batch_size=3)
    p1, h1 = train(sp, cfg)
    p2, h2 = train(sp, cfg)
    for a, b in zip(p1.named_tensors().values(), p2.named_tensors().values()):
        assert a.data.tobytes() == b.data.tobytes()
    assert h1.nll == h2.nll and len(h1) == 40
    assert h1.nll[-1] < h1.nll[0]
    assert sum(h1.skipped) == 0
    assert total_nll(p1, sp) < total_nll(init_model_params(cfg, sp.series_ids, 4), sp)


# --- forecasting ----------------------------------------------------------


def test_gaussian_quantile_worked_values():
    assert gaussian_quantile(0.0, 1.0, 0.5) == 0.0
    assert gaussian_quantile(0.0, 1.0, 0.9) == pytest.approx(1.281552, abs=1e-6)
    assert gaussian_quantile(2.0, 4.0, 0.9) == pytest.approx(4.563103, abs=1e-6)
    with pytest.raises(DomainError):
        gaussian_quantile(0.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        gaussian_quantile(0.0, -1.0, 0.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(0, 1e6), st.floats(0.001, 0.998),
       st.floats(0.0005, 0.5))
def test_quantile_monotonicity(means, variance, rho1, gap):
    rho2 = min(rho1 + gap, 0.999)
    m = np.array(means)
    v = np.full(m.shape, variance)
    assert np.all(gaussian_quantile(m, v, rho1) <= gaussian_quantile(m, v, rho2))


def test_zero_residuals_revert_to_fixed_effect():
    sp = tiny_split(N=2)
    cfg = ModelConfig(**TINY, init_lengthscale=1e-4)
    params = init_model_params(cfg, sp.series_ids, 4)
    with ad.no_grad():
        F = ad.matmul(params.embeddings.W, global_factors(sp.covariates, params.lstm, params.projection)).data
    # Rescale loadings so mean |F| over the window is one; scaled targets then equal F.
    m = np.mean(np.abs(F[:, :24]), axis=1, keepdims=True)
    params.embeddings.W.data = params.embeddings.W.data / m
    F = F / m
    c = np.array([[3.0], [250.0]])
    sp.train_values = c * F[:, :24]
    res = forecast(params, sp)
    a2, s2 = cfg.init_amplitude**2, cfg.init_noise**2
    for b in range(2):
        np.testing.assert_allclose(res[b].mean, c[b] * F[b, 24:], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(res[b].variance, np.full(6, c[b, 0] ** 2 * (a2 + s2)), rtol=1e-10)


def test_zero_horizon_forecast_is_empty():
    sp = tiny_split(tau=0, T=24)
    params = init_model_params(ModelConfig(**TINY), sp.series_ids, 4)
    res = forecast(params, sp)
    assert all(r.mean.size == 0 and r.quantile_values[0.5].size == 0 for r in res)


def test_unknown_series_rejected():
    sp = tiny_split()
    params = init_model_params(ModelConfig(**TINY), ["x", "y", "z"], 4)
    with pytest.raises(UnknownSeriesError):
        forecast(params, sp)


_EQUI = {}


def _equivariance_setup():
    if not _EQUI:
        sp = tiny_split(N=2, seed=9)
        params = init_model_params(ModelConfig(**TINY), sp.series_ids, 4)
        rng = np.random.default_rng(5)
        for t in params.named_tensors().values():
            t.data = t.data + rng.normal(0.0, 0.2, size=t.shape)
        sp.train_values = sp.train_values + 5.0
        _EQUI.update(split=sp, params=params, base=forecast(params, sp))
    return _EQUI


@given(st.floats(1e-2, 1e3), st.integers(0, 1))
def test_scale_equivariance(c, row):
    setup = _equivariance_setup()
    sp, base = setup["split"], setup["base"]
    sp2 = dataclasses.replace(sp, train_values=sp.train_values.copy())
    sp2.train_values[row] *= c
    res = forecast(setup["params"], sp2)
    np.testing.assert_allclose(res[row].mean, c * base[row].mean, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(res[row].variance, c * c * base[row].variance, rtol=1e-12)
    for q in (0.1, 0.5, 0.9):
        np.testing.assert_allclose(res[row].quantile_values[q], c * base[row].quantile_values[q], rtol=1e-11)
    other = 1 - row
    np.testing.assert_array_equal(res[other].mean, base[other].mean)


@pytest.mark.slow
def test_noiseless_synthetic_forecast_accuracy():
    ds, _ = synth_generate(SynthConfig(noise=0.0, gp_amplitude=0.0))
    sp = split_train_eval(ds, 168, 24)
    params, _ = train(sp, ModelConfig(n_factors=2, epochs=500))
    p50 = np.array([r.quantile_values[0.5] for r in forecast(params, sp)])
    z = sp.eval_values
    assert np.mean(np.abs(p50 - z) / np.abs(z)) < 0.15
