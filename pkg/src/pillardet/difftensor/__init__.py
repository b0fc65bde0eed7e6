"""Reverse-mode autodiff core: tensors, layers, optimizer, gradient checks."""

from . import checkpoint, gradcheck, nn, optim, tensor
from .gradcheck import GradReport, finite_difference_check
from .nn import Buffer, Module, Parameter
from .optim import Adam, cosine_lr
from .tensor import Tensor, no_grad

__all__ = [
    "Adam",
    "Buffer",
    "GradReport",
    "Module",
    "Parameter",
    "Tensor",
    "checkpoint",
    "cosine_lr",
    "finite_difference_check",
    "gradcheck",
    "nn",
    "no_grad",
    "optim",
    "tensor",
]
