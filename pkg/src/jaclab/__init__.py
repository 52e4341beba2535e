"""Jacobian-constrained families of elliptic solutions on piecewise domains."""

__version__ = "0.1.0"
