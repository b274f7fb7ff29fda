"""Deterministic float64 tensors with define-by-run reverse-mode differentiation."""

from .rng import Rng, uniform
from .tensor import (
    Graph,
    Tensor,
    backward,
    concat,
    cross_entropy,
    matmul,
    no_grad,
    parameter,
    softmax_rows,
)

__all__ = [
    "Graph",
    "Rng",
    "Tensor",
    "backward",
    "concat",
    "cross_entropy",
    "matmul",
    "no_grad",
    "parameter",
    "softmax_rows",
    "uniform",
]
