"""Minimal reverse- and forward-mode automatic differentiation over numpy."""

from . import ops
from .graph import (
    PRIMITIVES,
    DualValue,
    Value,
    as_array,
    grad_enabled,
    no_grad,
    op_counts,
    reset_op_counts,
)
from .grad import backward, finite_diff_directional, jvp
from .ops import stop_gradient

__all__ = [
    "PRIMITIVES",
    "DualValue",
    "Value",
    "as_array",
    "backward",
    "finite_diff_directional",
    "grad_enabled",
    "jvp",
    "no_grad",
    "op_counts",
    "ops",
    "reset_op_counts",
    "stop_gradient",
]
