"""Attention-driven spectral band selection for hyperspectral pixel classification."""

__version__ = "0.1.0"
