"""Tensor arithmetic, reverse-mode autodiff and neural-network primitives."""

from . import functional, kernels, nn, optim
from .tensor import Tensor, default_dtype, no_grad, set_default_dtype

__all__ = ["Tensor", "functional", "kernels", "nn", "optim", "no_grad", "default_dtype", "set_default_dtype"]
