"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check, numerical_grad
from .tensor import (
    DimensionError,
    GraphError,
    NumericalError,
    Tensor,
    as_tensor,
    check_finite,
    default_dtype,
    is_grad_enabled,
    no_grad,
    parameter,
    precision,
)

__all__ = [
    "DimensionError",
    "GraphError",
    "NumericalError",
    "Tensor",
    "as_tensor",
    "check_finite",
    "default_dtype",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "numerical_grad",
    "ops",
    "parameter",
    "precision",
]
