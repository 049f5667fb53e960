"""Attention-based graph networks for wind-farm power prediction."""

__version__ = "0.1.0"
