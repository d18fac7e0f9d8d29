"""Attention-only transformers on the RefEx referring-expression task."""

__version__ = "0.1.0"
