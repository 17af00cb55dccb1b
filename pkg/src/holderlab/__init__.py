"""Numerical checks of heat kernel and harmonic function estimates on fractal graphs."""

__version__ = "0.1.0"
