"""Global factor network: a one-layer LSTM over shared covariates projected to K factors.

Series ``i`` sees the factors through its embedding row ``w_i``; its fixed
effect at time ``t`` is ``w_i . g_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

# Gate blocks inside the 4*H columns, in this order.
GATES = ("input", "forget", "cell", "output")


@dataclass
class LSTMParams:
    input_weights: Tensor  # (d, 4H)
    recurrent_weights: Tensor  # (H, 4H)
    biases: Tensor  # (1, 4H)

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.recurrent_weights.shape[0]


@dataclass
class FactorProjection:
    weight: Tensor  # (H, K)
    bias: Tensor  # (1, K)

    @property
    def n_factors(self) -> int:
        return self.weight.shape[1]


@dataclass
class EmbeddingTable:
    W: Tensor  # (N, K)

    @property
    def n_series(self) -> int:
        return self.W.shape[0]


@dataclass
class LSTMState:
    hidden: Tensor  # (1, H)
    cell: Tensor  # (1, H)

    @classmethod
    def zeros(cls, hidden_dim: int) -> LSTMState:
        return cls(Tensor(np.zeros((1, hidden_dim))), Tensor(np.zeros((1, hidden_dim))))


def lstm_step(state: LSTMState, x_t, params: LSTMParams) -> LSTMState:
    """One LSTM cell update; ``x_t`` is a (1, d) row or a length-d vector."""
    if not isinstance(x_t, Tensor):
        x_t = Tensor(np.asarray(x_t, dtype=np.float64).reshape(1, -1))
    elif x_t.data.ndim == 1:
        x_t = ad.reshape(x_t, (1, x_t.shape[0]))
    if x_t.shape != (1, params.input_dim):
        raise ShapeError(f"lstm_step: input of shape {x_t.shape}, expected (1, {params.input_dim})")
    H = params.hidden_dim
    if state.hidden.shape != (1, H) or state.cell.shape != (1, H):
        raise ShapeError(f"lstm_step: state shapes {state.hidden.shape}/{state.cell.shape}, expected (1, {H})")

    z = ad.matmul(x_t, params.input_weights) + ad.matmul(state.hidden, params.recurrent_weights)
    z = z + params.biases
    i = ad.sigmoid(z[:, 0:H])
    f = ad.sigmoid(z[:, H:2 * H])
    g = ad.tanh(z[:, 2 * H:3 * H])
    o = ad.sigmoid(z[:, 3 * H:4 * H])
    cell = f * state.cell + i * g
    hidden = o * ad.tanh(cell)
    return LSTMState(hidden=hidden, cell=cell)


def global_factors(covariates, params: LSTMParams, proj: FactorProjection) -> Tensor:
    """Run the LSTM from a zero state over a (T, d) covariate sequence; return (K, T) factors."""
    X = covariates.data if isinstance(covariates, Tensor) else np.asarray(covariates, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ShapeError(f"global_factors: covariates {X.shape}, expected (T, {params.input_dim})")
    T = X.shape[0]
    if T < 1:
        raise ShapeError("global_factors: empty covariate sequence")
    state = LSTMState.zeros(params.hidden_dim)
    rows = []
    for t in range(T):
        state = lstm_step(state, Tensor(X[t:t + 1]), params)
        rows.append(ad.matmul(state.hidden, proj.weight) + proj.bias)
    return ad.transpose(ad.concat(rows, axis=0))


def fixed_effect(w, g: Tensor) -> Tensor:
    """``f_t = sum_k w_k g_{k,t}`` for a single loading vector; returns shape (T,)."""
    if not isinstance(w, Tensor):
        w = Tensor(w)
    K = g.shape[0]
    if w.size != K:
        raise ShapeError(f"fixed_effect: loading of size {w.size} for {K} factors")
    row = w if w.shape == (1, K) else ad.reshape(w, (1, K))
    return ad.reshape(ad.matmul(row, g), (g.shape[1],))


def init_params(seed: int, *, input_dim: int, hidden_dim: int, n_factors: int, n_series: int):
    """Deterministic initial LSTM, projection and embedding parameters.

    Weights are Uniform(-s, s) with ``s = 1/sqrt(hidden_dim)``; all biases are
    zero except the forget gate, which starts at 1; embeddings are
    Normal(0, 1/sqrt(n_factors)).
    """
    rng = np.random.default_rng(seed)
    H, K = hidden_dim, n_factors
    s = 1.0 / math.sqrt(H)
    w_in = rng.uniform(-s, s, size=(input_dim, 4 * H))
    w_rec = rng.uniform(-s, s, size=(H, 4 * H))
    b = np.zeros((1, 4 * H))
    b[0, H:2 * H] = 1.0
    w_proj = rng.uniform(-s, s, size=(H, K))
    b_proj = np.zeros((1, K))
    emb = rng.normal(0.0, 1.0 / math.sqrt(K), size=(n_series, K))

    lstm = LSTMParams(
        input_weights=Tensor(w_in, requires_grad=True, name="lstm.input_weights"),
        recurrent_weights=Tensor(w_rec, requires_grad=True, name="lstm.recurrent_weights"),
        biases=Tensor(b, requires_grad=True, name="lstm.biases"),
    )
    proj = FactorProjection(
        weight=Tensor(w_proj, requires_grad=True, name="projection.weight"),
        bias=Tensor(b_proj, requires_grad=True, name="projection.bias"),
    )
    table = EmbeddingTable(W=Tensor(emb, requires_grad=True, name="embeddings.W"))
    return lstm, proj, table
