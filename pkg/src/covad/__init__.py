"""Covariance-based activity detection for massive-MIMO random access."""

__version__ = "0.1.0"
