"""Per-series RBF Gaussian process: kernel, exact marginal likelihood, posterior.

Hyperparameters live in log space. The negative log marginal likelihood is
computed with a Cholesky factor and joins the autodiff tape as a single node
whose gradient is the closed-form expression, so the factorization itself is
never differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linalg import DEFAULT_JITTER_SCHEDULE, cho_inverse, cho_solve, cholesky, log_det, triangular_solve

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-12

DEFAULT_AMPLITUDE = 0.1
DEFAULT_LENGTHSCALE = 0.05
DEFAULT_NOISE = 0.1


def _value(x) -> float:
    if isinstance(x, Tensor):
        return x.item()
    return float(np.asarray(x, dtype=np.float64).reshape(-1)[0])


@dataclass
class KernelParams:
    """Log amplitude, log lengthscale and log noise of one series.

    Fields may be floats or single-element tensors; tensors let the NLL
    send gradients back to them.
    """

    log_amplitude: float | Tensor = math.log(DEFAULT_AMPLITUDE)
    log_lengthscale: float | Tensor = math.log(DEFAULT_LENGTHSCALE)
    log_noise: float | Tensor = math.log(DEFAULT_NOISE)

    @classmethod
    def from_natural(cls, amplitude: float, lengthscale: float, noise: float) -> KernelParams:
        return cls(math.log(amplitude), math.log(lengthscale), math.log(noise))

    @property
    def amplitude(self) -> float:
        return math.exp(_value(self.log_amplitude))

    @property
    def lengthscale(self) -> float:
        return math.exp(_value(self.log_lengthscale))

    @property
    def noise(self) -> float:
        return math.exp(_value(self.log_noise))

    def tensors(self) -> tuple[Tensor, Tensor, Tensor]:
        return tuple(
            v if isinstance(v, Tensor) else Tensor(np.array([float(v)]))
            for v in (self.log_amplitude, self.log_lengthscale, self.log_noise)
        )


@dataclass
class GPPosterior:
    mean: np.ndarray
    variance: np.ndarray
    series_id: int | str | None = None


def _sqdist(x1, x2) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    d = x1[:, None] - x2[None, :]
    return d * d


def rbf_kernel_matrix(X1, X2, params: KernelParams) -> np.ndarray:
    """``a^2 exp(-(x - x')^2 / (2 l^2))`` for every pair of scalar inputs."""
    a2 = params.amplitude**2
    ell = params.lengthscale
    return a2 * np.exp(-_sqdist(X1, X2) / (2.0 * ell * ell))


def nll_value_and_grads(residuals, inputs, params: KernelParams, jitter_schedule=DEFAULT_JITTER_SCHEDULE):
    """Return ``(nll, d_residuals, d_log_amplitude, d_log_lengthscale, d_log_noise)``."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    n = r.size
    if n < 1:
        raise ValueError("gp_nll needs at least one observation")
    sq = _sqdist(inputs, inputs)
    ell = params.lengthscale
    sigma2 = params.noise**2
    Kf = params.amplitude**2 * np.exp(-sq / (2.0 * ell * ell))
    Ky = Kf + sigma2 * np.eye(n)

    factor = cholesky(Ky, jitter_schedule)
    alpha = cho_solve(factor, r)
    nll = 0.5 * float(r @ alpha) + 0.5 * log_det(factor) + 0.5 * n * LOG_2PI

    W = cho_inverse(factor) - np.outer(alpha, alpha)
    d_log_amp = float(np.sum(W * Kf))
    d_log_ell = 0.5 * float(np.sum(W * Kf * sq)) / (ell * ell)
    d_log_noise = sigma2 * float(np.trace(W))
    return nll, alpha, d_log_amp, d_log_ell, d_log_noise


def gp_nll(residuals: Tensor, inputs, params: KernelParams, jitter_schedule=DEFAULT_JITTER_SCHEDULE) -> Tensor:
    """Negative log marginal likelihood of ``residuals`` under the zero-mean GP.

    The result is a scalar tape node; its gradient flows to ``residuals`` and
    to whichever of the three log hyperparameters are tensors.
    """
    if not isinstance(residuals, Tensor):
        residuals = Tensor(residuals)
    values = nll_value_and_grads(residuals.data, inputs, params, jitter_schedule)
    return nll_node(residuals, params, values)


def nll_node(residuals: Tensor, params: KernelParams, values) -> Tensor:
    """Record an NLL already computed by :func:`nll_value_and_grads` on the tape."""
    hyper = params.tensors()
    nll, alpha, ga, gl, gn = values
    alpha = alpha.reshape(residuals.shape)

    def rule(g):
        g = float(g)
        return (
            g * alpha,
            np.full(hyper[0].shape, g * ga),
            np.full(hyper[1].shape, g * gl),
            np.full(hyper[2].shape, g * gn),
        )

    return ad.custom_gradient(np.array(nll), (residuals, *hyper), rule, op="gp_nll")


def gp_posterior(train_X, train_residuals, test_X, params: KernelParams,
                 series_id=None, jitter_schedule=DEFAULT_JITTER_SCHEDULE) -> GPPosterior:
    """Predictive mean and marginal variance (observation noise included) at ``test_X``."""
    r = np.asarray(train_residuals.data if isinstance(train_residuals, Tensor) else train_residuals,
                   dtype=np.float64).reshape(-1)
    test_X = np.asarray(test_X, dtype=np.float64).reshape(-1)
    if r.size < 1:
        raise ValueError("gp_posterior needs at least one training point")
    sigma2 = params.noise**2
    prior = params.amplitude**2 + sigma2

    Ky = rbf_kernel_matrix(train_X, train_X, params) + sigma2 * np.eye(r.size)
    factor = cholesky(Ky, jitter_schedule)
    alpha = cho_solve(factor, r)
    Ks = rbf_kernel_matrix(train_X, test_X, params)
    mean = Ks.T @ alpha
    v = triangular_solve(factor, Ks)
    var = np.maximum(prior - np.sum(v * v, axis=0), VARIANCE_FLOOR)
    return GPPosterior(mean=mean, variance=var, series_id=series_id)
