"""Desk-scale circuit discovery and causal-variable localization on toy transformers."""

__version__ = "0.1.0"
