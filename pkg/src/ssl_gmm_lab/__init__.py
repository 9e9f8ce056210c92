"""Numerical laboratory for semi-supervised two-cluster classification."""

__version__ = "0.1.0"
