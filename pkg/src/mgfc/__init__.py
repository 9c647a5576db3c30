"""Desk-scale multi-granularity feature calibration for domain-generalized
semantic segmentation, built on a from-scratch autodiff tensor engine."""

from .tensor import Tensor, precision, set_precision

__all__ = ["Tensor", "precision", "set_precision"]
__version__ = "0.1.0"
