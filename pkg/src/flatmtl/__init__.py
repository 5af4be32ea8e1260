"""Sharpness-aware multi-task optimization with separate loss/flat aggregation."""
__version__ = "0.1.0"
