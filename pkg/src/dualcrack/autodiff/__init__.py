"""Dense tensors with reverse-mode automatic differentiation."""

from . import nn, ops
from .gradcheck import GradReport, finite_diff_check, projected, relative_error
from .ops import ConfigurationError, ShapeError
from .tensor import Tape, Tensor, UsageError, active_tape, backward

__all__ = [
    "ConfigurationError", "GradReport", "ShapeError", "Tape", "Tensor", "UsageError",
    "active_tape", "backward", "finite_diff_check", "nn", "ops", "projected",
    "relative_error",
]
