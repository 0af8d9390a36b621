"""Swap-adversarial domain generalization for multichannel time series."""

__version__ = "0.1.0"
