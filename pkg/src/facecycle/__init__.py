"""Unsupervised disentanglement of expression and identity from face videos."""

__version__ = "0.1.0"
