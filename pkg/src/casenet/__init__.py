"""Causal, channel-recalibrated multi-scale encoder for multivariate
time-series classification, on a small numpy autodiff engine."""

from .layers import ModelConfig, init_params, model_forward
from .tensor import Tensor, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = ["ModelConfig", "Tensor", "backward", "finite_diff_check", "init_params",
           "model_forward", "__version__"]
