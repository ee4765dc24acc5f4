"""Classifier-synthesis learning for generalized few-shot learning."""

__version__ = "0.1.0"
