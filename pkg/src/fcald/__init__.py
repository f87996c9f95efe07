"""Numerical laboratory for inverse problems of fractional-power semilinear elliptic equations."""

__version__ = "0.1.0"
