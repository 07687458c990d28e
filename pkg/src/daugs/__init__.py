"""Uncertainty-guided sliding-patch analysis of dynamic 2D+time image series."""

__version__ = "0.1.0"
