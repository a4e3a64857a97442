"""Minimal dense-tensor engine with reverse-mode autodiff."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import MLP, Conv2d, LayerNorm, Linear, Module
from .optim import SGD, Adam, clip_grad_norm
from .tensor import (
    GeometryError,
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    get_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_precision,
)
from .gradcheck import numerical_grad, rel_error

__all__ = [
    "Adam", "CheckpointError", "Conv2d", "GeometryError", "LayerNorm", "Linear", "MLP", "Module",
    "NumericalError", "Parameter", "SGD", "ShapeError", "Tensor", "clip_grad_norm", "get_dtype",
    "is_grad_enabled", "load_checkpoint", "no_grad", "numerical_grad", "ops", "precision",
    "rel_error", "save_checkpoint", "set_precision",
]
