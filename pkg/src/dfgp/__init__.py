"""Deep factor forecasting with per-series Gaussian-process random effects.

A shared LSTM produces latent factor series; each observed series is a
learned linear combination of them plus an RBF Gaussian-process residual.
Everything is trained by exact marginal likelihood on a small numpy
autodiff engine.
"""

__version__ = "0.1.0"

from .data import FeatureSpec, SynthConfig, load_long_csv, split_train_eval, synth_generate  # noqa: E402
from .metrics import EvalReport, evaluate, normalized_quantile_loss, quantile_loss, rmse  # noqa: E402
from .model import ModelConfig, ModelParams, forecast, train  # noqa: E402

__all__ = [
    "EvalReport", "FeatureSpec", "ModelConfig", "ModelParams", "SynthConfig", "evaluate", "forecast",
    "load_long_csv", "normalized_quantile_loss", "quantile_loss", "rmse", "split_train_eval",
    "synth_generate", "train",
]
