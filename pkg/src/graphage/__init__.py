"""Patch-graph self-supervised learning with closed-form age estimation."""

__version__ = "0.1.0"

from .tensor import Tensor, grad_check, stop_gradient  # noqa: F401
