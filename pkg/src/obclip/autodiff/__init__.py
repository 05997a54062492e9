"""Reverse-mode differentiation over dense float64 tensors."""

from . import ops
from .gradcheck import finite_diff_gradient, relative_error
from .graph import (
    AutodiffError,
    AxisError,
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    retained_elements,
    tagged_flops,
)

__all__ = [
    "AutodiffError",
    "AxisError",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_diff_gradient",
    "ops",
    "relative_error",
    "retained_elements",
    "tagged_flops",
]
