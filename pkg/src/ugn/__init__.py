"""Uncertainty-gated segmentation network with a numpy reverse-mode autodiff core."""

from .tensor import Tensor, backward, gradient_check, no_grad, precision, stop_gradient

__all__ = ["Tensor", "backward", "gradient_check", "no_grad", "precision", "stop_gradient"]
__version__ = "0.1.0"
