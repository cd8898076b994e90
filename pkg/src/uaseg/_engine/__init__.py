"""Minimal reverse-mode autodiff engine with swappable convolution kernels."""

from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad
from . import ops
from .kernels import available_backends, get_backend, set_backend

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "grad_enabled",
    "no_grad",
    "ops",
    "available_backends",
    "get_backend",
    "set_backend",
]
