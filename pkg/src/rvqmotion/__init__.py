"""Residual-quantized motion codec and two-tier autoregressive generator."""

from .kernels import BACKEND as kernel_backend
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "kernel_backend", "__version__"]
