"""Spatial regimes in production functions."""
__version__ = "0.1.0"
