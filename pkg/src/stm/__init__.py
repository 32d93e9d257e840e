"""Separate-then-Map human-centric Gaussian reconstruction."""

__version__ = "0.1.0"
