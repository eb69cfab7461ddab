"""Adaptive offset cache correction for iterative denoising inference."""

__version__ = "0.1.0"
