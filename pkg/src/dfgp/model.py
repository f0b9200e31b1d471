"""Deep factors with per-series GP residuals: loss, training and forecasting.

Observations are modelled on the per-series scaled axis as

    z_i = w_i . g + r_i,   r_i ~ GP(0, RBF_i) + N(0, sigma_i^2)

where ``g`` comes from the shared LSTM factor network. Training maximizes the
exact Gaussian marginal likelihood; forecasts add the GP posterior of the
residuals to the extrapolated fixed effect.
"""

from __future__ import annotations

import logging
import math
import os
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import autodiff as ad
from . import gp
from .autodiff import Tensor
from .data import DEFAULT_FEATURES, FEATURES, SplitData, fit_scaler, normalized_time
from .errors import ConfigError, DomainError, NumericError, UnknownSeriesError
from .factors import EmbeddingTable, FactorProjection, LSTMParams, global_factors, init_params

log = logging.getLogger(__name__)

AUTO_BATCH_LIMIT = 64


@dataclass
class ModelConfig:
    n_factors: int = 10
    hidden_dim: int = 50
    horizon: int = 24
    train_window: int = 168
    learning_rate: float = 0.01
    epochs: int = 2000
    batch_size: int = 0  # 0: all series when N <= 64, else 64
    seed: int = 0
    softmax_loadings: bool = False
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    clip_norm: float = 10.0
    features: tuple[str, ...] = DEFAULT_FEATURES
    init_amplitude: float = gp.DEFAULT_AMPLITUDE
    init_lengthscale: float = gp.DEFAULT_LENGTHSCALE
    init_noise: float = gp.DEFAULT_NOISE

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        self.features = tuple(self.features)
        problems = []
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if self.train_window < 2:
            problems.append("train_window must be >= 2")
        if self.n_factors < 1:
            problems.append("n_factors must be >= 1")
        if self.hidden_dim < 1:
            problems.append("hidden_dim must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 0:
            problems.append("batch_size must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if not self.clip_norm > 0:
            problems.append("clip_norm must be > 0")
        if not self.quantiles or any(not 0.0 < q < 1.0 for q in self.quantiles):
            problems.append("quantiles must lie in (0, 1)")
        elif any(b <= a for a, b in zip(self.quantiles, self.quantiles[1:])):
            problems.append("quantiles must be strictly increasing")
        if not self.features or any(f not in FEATURES for f in self.features):
            problems.append(f"features must be drawn from {FEATURES}")
        for name in ("init_amplitude", "init_lengthscale", "init_noise"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def batch_size_for(self, n_series: int) -> int:
        if self.batch_size:
            return min(self.batch_size, n_series)
        return n_series if n_series <= AUTO_BATCH_LIMIT else AUTO_BATCH_LIMIT


@dataclass
class KernelTable:
    """Per-series log hyperparameters, one entry per embedding row."""

    log_amplitude: Tensor  # (N,)
    log_lengthscale: Tensor  # (N,)
    log_noise: Tensor  # (N,)

    def for_series(self, i: int) -> gp.KernelParams:
        return gp.KernelParams(
            self.log_amplitude[i:i + 1], self.log_lengthscale[i:i + 1], self.log_noise[i:i + 1]
        )

    def values_for(self, i: int) -> gp.KernelParams:
        return gp.KernelParams(
            float(self.log_amplitude.data[i]),
            float(self.log_lengthscale.data[i]),
            float(self.log_noise.data[i]),
        )


@dataclass
class ModelParams:
    lstm: LSTMParams
    projection: FactorProjection
    embeddings: EmbeddingTable
    kernel: KernelTable
    series_ids: list[str]
    config: ModelConfig = field(default_factory=ModelConfig)

    def named_tensors(self) -> OrderedDict[str, Tensor]:
        return OrderedDict(
            [
                ("lstm.input_weights", self.lstm.input_weights),
                ("lstm.recurrent_weights", self.lstm.recurrent_weights),
                ("lstm.biases", self.lstm.biases),
                ("projection.weight", self.projection.weight),
                ("projection.bias", self.projection.bias),
                ("embeddings.W", self.embeddings.W),
                ("kernel.log_amplitude", self.kernel.log_amplitude),
                ("kernel.log_lengthscale", self.kernel.log_lengthscale),
                ("kernel.log_noise", self.kernel.log_noise),
            ]
        )

    def index_of(self, series_id: str) -> int:
        try:
            return self.series_ids.index(series_id)
        except ValueError:
            raise UnknownSeriesError(f"series {series_id!r} has no embedding row") from None

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], series_ids, config: ModelConfig) -> ModelParams:
        def leaf(name):
            return Tensor(arrays[name], requires_grad=True, name=name)

        return cls(
            lstm=LSTMParams(leaf("lstm.input_weights"), leaf("lstm.recurrent_weights"), leaf("lstm.biases")),
            projection=FactorProjection(leaf("projection.weight"), leaf("projection.bias")),
            embeddings=EmbeddingTable(leaf("embeddings.W")),
            kernel=KernelTable(
                leaf("kernel.log_amplitude"), leaf("kernel.log_lengthscale"), leaf("kernel.log_noise")
            ),
            series_ids=list(series_ids),
            config=config,
        )

    def copy(self) -> ModelParams:
        arrays = {k: t.data for k, t in self.named_tensors().items()}
        return ModelParams.from_arrays(arrays, self.series_ids, self.config)


def init_model_params(config: ModelConfig, series_ids, input_dim: int) -> ModelParams:
    n = len(series_ids)
    lstm, proj, emb = init_params(
        config.seed, input_dim=input_dim, hidden_dim=config.hidden_dim,
        n_factors=config.n_factors, n_series=n,
    )

    def const(name, value):
        return Tensor(np.full(n, math.log(value)), requires_grad=True, name=name)

    kernel = KernelTable(
        const("kernel.log_amplitude", config.init_amplitude),
        const("kernel.log_lengthscale", config.init_lengthscale),
        const("kernel.log_noise", config.init_noise),
    )
    return ModelParams(lstm, proj, emb, kernel, list(series_ids), config)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DFGP_THREADS", "1")))
    except ValueError:
        return 1


def loadings(params: ModelParams, rows) -> Tensor:
    """Embedding rows for the given series indices, softmax-normalized if configured."""
    w = params.embeddings.W[np.asarray(rows, dtype=np.intp)]
    if not params.config.softmax_loadings:
        return w
    e = ad.exp(w)
    totals = ad.reshape(ad.sum(e, axis=1), (w.shape[0], 1))
    return ad.div(e, ad.tile(totals, (1, w.shape[1])))


def batch_loss(params: ModelParams, covariates, scaled_values, rows, gp_inputs=None) -> Tensor:
    """Sum of per-series GP negative log marginal likelihoods of ``z - w . g``.

    ``scaled_values[b]`` is the scaled training window of series ``rows[b]``;
    all windows share ``covariates`` (W, d). The factors are computed once.
    """
    z = np.atleast_2d(np.asarray(scaled_values, dtype=np.float64))
    rows = [int(r) for r in rows]
    if z.shape[0] != len(rows):
        raise ValueError(f"{z.shape[0]} value rows for {len(rows)} series")
    W = z.shape[1]
    x = normalized_time(W, W) if gp_inputs is None else np.asarray(gp_inputs, dtype=np.float64)

    g = global_factors(covariates, params.lstm, params.projection)
    F = ad.matmul(loadings(params, rows), g)
    residuals = [ad.sub(Tensor(z[b]), F[b]) for b in range(len(rows))]
    kernels = [params.kernel.for_series(r) for r in rows]

    def one(b):
        try:
            return gp.nll_value_and_grads(residuals[b].data, x, kernels[b])
        except NumericError as exc:
            raise type(exc)(f"series {params.series_ids[rows[b]]!r}: {exc}") from exc

    threads = min(_threads(), len(rows))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(one, range(len(rows))))
    else:
        values = [one(b) for b in range(len(rows))]

    total = None
    for b in range(len(rows)):
        term = gp.nll_node(residuals[b], kernels[b], values[b])
        total = term if total is None else ad.add(total, term)
    return total


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: float = 10.0) -> tuple[bool, float]:
    """Clip by global norm, then apply one bias-corrected Adam update in place.

    Returns ``(applied, norm)`` where ``norm`` is the pre-clip gradient norm.
    A step with non-finite gradients, or one that would leave a non-finite
    parameter, is skipped and logged.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        log.warning("adam: non-finite gradient at step %d, update skipped", state.step + 1)
        return False, norm
    factor = clip_norm / norm if norm > clip_norm else 1.0

    t = state.step + 1
    new_values, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name] * factor if factor != 1.0 else grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_values[name] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    if not all(np.all(np.isfinite(a)) for a in new_values.values()):
        log.warning("adam: update at step %d would produce non-finite parameters, skipped", t)
        return False, norm
    for name, p in params.items():
        p.data = new_values[name]
    state.step, state.m, state.v = t, new_m, new_v
    return True, norm


# ------------------------------------------------------------------ training


@dataclass
class TrainHistory:
    nll: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nll)


def train(split: SplitData, config: ModelConfig, params: ModelParams | None = None,
          callback=None) -> tuple[ModelParams, TrainHistory]:
    """Fit all parameters by Adam on the summed marginal likelihood.

    Each epoch shuffles the series (seeded) and takes one optimizer step per
    batch. The recorded epoch NLL is the sum of the batch losses evaluated
    before their updates.
    """
    N = len(split.series_ids)
    if N == 0 or split.train_values.size == 0:
        raise ConfigError("cannot train on an empty dataset")
    W = split.train_window
    scaler = fit_scaler(split.train_values)
    z = scaler.apply(split.train_values)
    covariates = split.covariates[:W]
    x = normalized_time(W, W)
    if params is None:
        params = init_model_params(config, split.series_ids, covariates.shape[1])
    named = params.named_tensors()
    state = AdamState()
    history = TrainHistory()
    rng = np.random.default_rng([config.seed, 1])
    bs = config.batch_size_for(N)

    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(N)
        total, norms, skipped = 0.0, [], 0
        for lo in range(0, N, bs):
            rows = order[lo:lo + bs]
            params.zero_grad()
            with ad.Tape() as tape:
                loss = batch_loss(params, covariates, z[rows], rows, x)
            tape.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}
            applied, norm = adam_step(named, grads, state, config.learning_rate, clip_norm=config.clip_norm)
            total += loss.item()
            norms.append(norm)
            skipped += not applied
        params.zero_grad()
        history.nll.append(total)
        history.grad_norm.append(float(np.mean(norms)))
        history.seconds.append(time.perf_counter() - start)
        history.skipped.append(skipped)
        if skipped:
            log.warning("epoch %d: %d optimizer step(s) skipped", epoch, skipped)
        if callback is not None:
            callback(epoch, history)
    return params, history


def total_nll(params: ModelParams, split: SplitData) -> float:
    """Summed NLL over every training window, without recording gradients."""
    W = split.train_window
    z = fit_scaler(split.train_values).apply(split.train_values)
    rows = [params.index_of(s) for s in split.series_ids]
    with ad.no_grad():
        return batch_loss(params, split.covariates[:W], z, rows).item()


# ------------------------------------------------------------------ forecasting


@dataclass
class ForecastResult:
    series_id: str
    timestamps: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    quantile_values: dict[float, np.ndarray]


_STD_NORMAL = NormalDist()


def gaussian_quantile(mean, variance, rho: float):
    """``mean + sqrt(variance) * Phi^-1(rho)``, elementwise."""
    if not 0.0 < rho < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {rho}")
    var = np.asarray(variance, dtype=np.float64)
    if np.any(var < 0):
        raise DomainError("variance must be non-negative")
    q = np.asarray(mean, dtype=np.float64) + np.sqrt(var) * _STD_NORMAL.inv_cdf(rho)
    return float(q) if q.ndim == 0 else q


def forecast(params: ModelParams, split: SplitData, quantiles=None) -> list[ForecastResult]:
    """Predictive marginals over ``split.eval_timestamps`` for every series in ``split``.

    The conditioning window is ``split.train_values``; its scale is refit
    here and undone on the outputs.
    """
    quantiles = tuple(params.config.quantiles if quantiles is None else quantiles)
    rows = [params.index_of(s) for s in split.series_ids]
    W, tau = split.train_window, split.horizon
    scaler = fit_scaler(split.train_values)
    z = scaler.apply(split.train_values)
    x_train = normalized_time(W, W)
    x_test = normalized_time(tau, W, offset=W)

    with ad.no_grad():
        g = global_factors(split.covariates[:W + tau], params.lstm, params.projection)
        F = ad.matmul(loadings(params, rows), g).data

    results = []
    for b, (sid, row) in enumerate(zip(split.series_ids, rows)):
        resid = z[b] - F[b, :W]
        post = gp.gp_posterior(x_train, resid, x_test, params.kernel.values_for(row), series_id=sid)
        s = scaler.scales[b]
        mean = s * (F[b, W:] + post.mean)
        var = s * s * post.variance
        qv = {q: gaussian_quantile(mean, var, q) for q in quantiles}
        results.append(ForecastResult(sid, split.eval_timestamps.copy(), mean, var, qv))
    return results
