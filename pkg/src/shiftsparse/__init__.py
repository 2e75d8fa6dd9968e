"""Shift-invariant k-means and convolutional dictionary learning."""

__version__ = "0.1.0"
