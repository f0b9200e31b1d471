"""Finite-difference check of every parameter gradient on a miniature model.

The full training loss (LSTM factors, loadings, per-series GP likelihood) is
differentiated on the tape and compared with central differences, one
parameter tensor at a time. Errors are norm-wise relative:

    max|a - b| / max(max|a|, max|b|, 1e-8)

and the report keeps the worst tensor of each parameter group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import normalized_time
from .model import ModelConfig, batch_loss, init_model_params

GROUPS = ("lstm", "projection", "embeddings", "kernel")
TOLERANCE = 1e-4
N_SERIES = 3
LENGTH = 20
N_FACTORS = 2
HIDDEN = 4
INPUT_DIM = 3
N_SEEDS = 20


@dataclass
class GradcheckReport:
    max_error: dict[str, float] = field(default_factory=lambda: {g: 0.0 for g in GROUPS})
    seeds: list[int] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_error.values())

    def lines(self) -> list[str]:
        out = [f"{g:<11s} max_rel_err={self.max_error[g]:.3e} "
               f"{'ok' if self.max_error[g] < self.tolerance else 'FAIL'}" for g in GROUPS]
        out.append(f"seeds={len(self.seeds)} tolerance={self.tolerance:g} "
                   f"result={'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def miniature_problem(seed: int):
    """Random parameters, covariates and targets for one check."""
    rng = np.random.default_rng([seed, 7])
    config = ModelConfig(n_factors=N_FACTORS, hidden_dim=HIDDEN, seed=seed)
    ids = [f"m{i}" for i in range(N_SERIES)]
    params = init_model_params(config, ids, INPUT_DIM)
    # Move off the initial values so gate biases and kernels are generic.
    for t in params.named_tensors().values():
        if not t.name.startswith("kernel."):
            t.data = t.data + rng.normal(0.0, 0.3, size=t.shape)
    params.kernel.log_amplitude.data = rng.uniform(math.log(0.3), math.log(1.5), N_SERIES)
    params.kernel.log_lengthscale.data = rng.uniform(math.log(0.05), math.log(0.5), N_SERIES)
    params.kernel.log_noise.data = rng.uniform(math.log(0.1), math.log(0.5), N_SERIES)
    covariates = rng.normal(size=(LENGTH, INPUT_DIM))
    values = rng.normal(size=(N_SERIES, LENGTH))
    return params, covariates, values


def check_seed(seed: int, h: float = 1e-5) -> dict[str, float]:
    params, covariates, values = miniature_problem(seed)
    rows = list(range(N_SERIES))
    x = normalized_time(LENGTH, LENGTH)
    named = params.named_tensors()

    params.zero_grad()
    with ad.Tape() as tape:
        loss = batch_loss(params, covariates, values, rows, x)
    tape.backward(loss)
    analytic = {k: t.grad.copy() for k, t in named.items()}
    params.zero_grad()

    worst = {g: 0.0 for g in GROUPS}
    for name, tensor in named.items():
        original = tensor.data

        def f(probe, tensor=tensor):
            tensor.data = probe.data
            return batch_loss(params, covariates, values, rows, x)

        try:
            numeric = ad.finite_difference_gradient(f, original, h)
        finally:
            tensor.data = original
        group = name.split(".", 1)[0]
        worst[group] = max(worst[group], relative_error(analytic[name], numeric))
    return worst


def run_gradcheck(seed: int = 0, n_seeds: int = N_SEEDS) -> GradcheckReport:
    report = GradcheckReport()
    for s in range(seed, seed + n_seeds):
        for g, e in check_seed(s).items():
            report.max_error[g] = max(report.max_error[g], e)
        report.seeds.append(s)
    return report
