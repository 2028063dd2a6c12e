"""Reproducible, benchmarkable image preprocessing for ML inference."""

__version__ = "0.1.0"
