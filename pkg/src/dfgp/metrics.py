"""Quantile losses, RMSE and interval coverage for probabilistic forecasts.

All functions take raw (original-scale) values; inputs may be scalars or
arrays of any matching shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNormalizerError, DomainError


def _check_rho(rho: float) -> None:
    if not 0.0 < rho < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {rho}")


def quantile_loss(z, z_hat, rho: float):
    """``2 * [rho (z - z_hat) 1{z > z_hat} + (1 - rho)(z_hat - z) 1{z <= z_hat}]``."""
    _check_rho(rho)
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    diff = z - z_hat
    loss = 2.0 * np.where(diff > 0, rho * diff, (1.0 - rho) * -diff)
    return float(loss) if loss.ndim == 0 else loss


def normalized_quantile_loss(targets, predictions, rho: float) -> float:
    z = np.asarray(targets, dtype=np.float64)
    z_hat = np.asarray(predictions, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError(f"targets {z.shape} and predictions {z_hat.shape} differ in shape")
    denom = float(np.sum(np.abs(z)))
    if z.size == 0 or denom == 0.0:
        raise DegenerateNormalizerError("sum of |targets| is zero")
    return float(np.sum(quantile_loss(z, z_hat, rho))) / denom


def rmse(targets, point_predictions) -> float:
    """Root of the summed squared error over all (series, step) pairs, divided by their count."""
    z = np.asarray(targets, dtype=np.float64)
    z_hat = np.asarray(point_predictions, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError(f"targets {z.shape} and predictions {z_hat.shape} differ in shape")
    if z.size == 0:
        raise DegenerateNormalizerError("rmse of an empty evaluation set")
    return float(np.sqrt(np.sum((z - z_hat) ** 2) / z.size))


def interval_coverage(targets, lower, upper) -> float:
    z = np.asarray(targets, dtype=np.float64)
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    if z.size == 0:
        return float("nan")
    return float(np.mean((z >= lo) & (z <= hi)))


def quantile_key(rho: float) -> str:
    """Column name for a quantile level: 0.1 -> ``p10``, 0.975 -> ``p97.5``."""
    return f"p{100.0 * rho:g}"


@dataclass
class EvalReport:
    quantile_losses: dict[float, float]
    rmse: float
    coverage: dict[tuple[float, float], float]
    n_points: int
    horizon: int | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {f"{quantile_key(r)}ql": v for r, v in sorted(self.quantile_losses.items())}
        out["rmse"] = self.rmse
        for (lo, hi), v in sorted(self.coverage.items()):
            out[f"coverage_{quantile_key(lo)}_{quantile_key(hi)}"] = v
        out["n_points"] = self.n_points
        if self.horizon is not None:
            out["horizon"] = self.horizon
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def evaluate(targets, mean, quantile_values: dict[float, np.ndarray], horizon: int | None = None) -> EvalReport:
    """Score a forecast against targets.

    ``quantile_values`` maps each level to an array shaped like ``targets``;
    coverage is reported for every (rho, 1 - rho) pair present.
    """
    z = np.asarray(targets, dtype=np.float64)
    losses = {float(r): normalized_quantile_loss(z, q, r) for r, q in quantile_values.items()}
    coverage = {}
    for r in sorted(quantile_values):
        partner = round(1.0 - r, 12)
        if r < 0.5 and partner in {round(q, 12) for q in quantile_values}:
            hi = next(q for q in quantile_values if round(q, 12) == partner)
            coverage[(r, hi)] = interval_coverage(z, quantile_values[r], quantile_values[hi])
    return EvalReport(
        quantile_losses=losses,
        rmse=rmse(z, mean),
        coverage=coverage,
        n_points=int(z.size),
        horizon=horizon,
    )
