"""Adversarial fine-tuning of a small transformer for idiomaticity detection."""

from ._jit import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
