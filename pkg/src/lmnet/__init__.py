"""Lightweight multi-scale segmentation network built on numpy.

Includes a small reverse-mode autodiff engine, multi-branch convolutions that
fold into single kernels for inference, global and local transformer
branches, segmentation metrics and a training loop.
"""

from . import backend
from .errors import (
    ContainerError,
    FusionError,
    GradientError,
    LmnetError,
    NonFiniteError,
    ShapeError,
    SizeError,
)
from .model import LmNet, LmNetConfig, calibrate_bn, tiny_config
from .reparam import count_cost, fuse_model
from .serialize import load_weights, save_weights
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ContainerError",
    "FusionError",
    "GradientError",
    "LmNet",
    "LmNetConfig",
    "LmnetError",
    "NonFiniteError",
    "ShapeError",
    "SizeError",
    "Tensor",
    "backend",
    "calibrate_bn",
    "count_cost",
    "fuse_model",
    "load_weights",
    "save_weights",
    "tiny_config",
    "__version__",
]
