"""Mutual-coupling-aware end-to-end channel model for RIS-aided links."""

__version__ = "0.1.0"
