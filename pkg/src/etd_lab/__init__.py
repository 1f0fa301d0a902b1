"""Encode-think-decode recursion over a small numpy transformer."""

__version__ = "0.1.0"

from .etd import EtdConfig, EtdConfigError, flops_layer_count, forward_etd, layer_trace, param_layer_count
from .model import ModelConfig, ModelParams, forward_plain, init_params

__all__ = [
    "EtdConfig",
    "EtdConfigError",
    "ModelConfig",
    "ModelParams",
    "flops_layer_count",
    "forward_etd",
    "forward_plain",
    "init_params",
    "layer_trace",
    "param_layer_count",
]
