"""Residual squeeze-and-excitation encoder-decoder for binary polyp segmentation,
built on numpy kernels with a small reverse-mode autodiff tape."""
from .errors import ConfigError, ContractError, PolypNetError, ShapeError
from .model import (
    Architecture,
    ModelParams,
    build_model,
    init_params,
    load_weights,
    model_forward,
    save_weights,
)

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ConfigError",
    "ContractError",
    "ModelParams",
    "PolypNetError",
    "ShapeError",
    "build_model",
    "init_params",
    "load_weights",
    "model_forward",
    "save_weights",
]
