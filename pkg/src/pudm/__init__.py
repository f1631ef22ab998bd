"""Positive-unlabeled training for denoising diffusion models on low-dimensional data."""

from pudm.errors import NumericError

__version__ = "0.1.0"

__all__ = ["NumericError", "__version__"]
