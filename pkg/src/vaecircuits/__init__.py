"""Causal-intervention interpretability for fully-connected VAEs on tabular and image data."""

__version__ = "0.1.0"
