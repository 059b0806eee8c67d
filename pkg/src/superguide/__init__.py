"""Superclass-guided representation disentanglement for group robustness."""

__version__ = "0.1.0"
