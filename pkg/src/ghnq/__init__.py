"""Quantization robustness of CNN initializations and of hypernetwork-predicted weights."""

__version__ = "0.1.0"
