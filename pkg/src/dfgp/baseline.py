"""Seasonal-naive reference forecaster."""

from __future__ import annotations

import numpy as np

from .model import gaussian_quantile


def seasonal_naive(train_values, horizon: int, season: int = 24, quantiles=(0.1, 0.5, 0.9)):
    """Repeat the last observed season; Gaussian bands from in-sample seasonal differences.

    Step ``h`` (1-based) predicts ``z[T - season + ((h - 1) % season)]`` with
    variance ``s2 * ceil(h / season)``, where ``s2`` is the mean squared
    seasonal difference over the training window.

    Returns ``(mean, variance, {rho: values})``, each shaped (N, horizon).
    """
    z = np.atleast_2d(np.asarray(train_values, dtype=np.float64))
    N, T = z.shape
    if T < season + 1:
        raise ValueError(f"need more than one season ({season}) of history, got {T}")
    h = np.arange(1, horizon + 1)
    idx = T - season + (h - 1) % season
    mean = z[:, idx]
    diffs = z[:, season:] - z[:, :-season]
    s2 = np.mean(diffs * diffs, axis=1, keepdims=True)
    variance = s2 * np.ceil(h / season)[None, :]
    qv = {q: gaussian_quantile(mean, variance, q) for q in quantiles}
    return mean, variance, qv
