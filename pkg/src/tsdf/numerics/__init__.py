"""Dense float tensors, reverse-mode differentiation and box projections."""

from . import tensor as ops
from .autodiff import evaluate_with_gradients, finite_difference_gradient
from .projection import clip_range, project_linf
from .tensor import (
    NonFiniteError,
    ShapeError,
    TapeNode,
    Tensor,
    as_tensor,
    default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "ops",
    "Tensor",
    "TapeNode",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "default_dtype",
    "no_grad",
    "precision",
    "evaluate_with_gradients",
    "finite_difference_gradient",
    "project_linf",
    "clip_range",
]
