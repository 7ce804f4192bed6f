"""Lightweight vision-Mamba classifier on a small numpy autodiff engine."""
from .arch import ModelConfig, ParamStore, count_parameters, init_params, model_forward
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ParamStore", "Tensor", "backward", "count_parameters",
           "init_params", "model_forward", "no_grad"]
