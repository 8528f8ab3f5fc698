"""Mamba-style selective-scan network for 4D light-field super-resolution, with
its own numpy autodiff engine, synthetic light-field data, training and evaluation."""

from .model import ModelConfig, init_params, mlfsr_forward
from .tensor import ParamStore, Tensor, no_grad

__all__ = ["ModelConfig", "ParamStore", "Tensor", "init_params", "mlfsr_forward", "no_grad"]
__version__ = "0.1.0"
