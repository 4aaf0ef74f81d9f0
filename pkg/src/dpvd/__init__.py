"""Differentially private variational dropout: model, privacy accounting and training."""

__version__ = "0.1.0"
