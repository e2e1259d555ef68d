"""From-scratch vision-transformer classification for tiled slide images.

The package is organized as a pipeline:

  preprocess  image normalization, bilinear resize, slide tiling, manifests
  autodiff    dense tensors with tape-based reverse-mode differentiation
  vit         the transformer model and its weight container format
  train       stratified splits, Adam, early stopping, checkpoints
  metrics     confusion matrix, precision/recall, one-vs-rest ROC
  cli         the ``tilevit`` command
"""

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor, grad_check
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    ParseError,
    TileVitError,
)
from .vit import Model, ModelParams, ViTConfig, init_params, load_weights, save_weights

__all__ = [
    "__version__",
    "GradTape",
    "Tensor",
    "grad_check",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "ParseError",
    "TileVitError",
    "Model",
    "ModelParams",
    "ViTConfig",
    "init_params",
    "load_weights",
    "save_weights",
]
