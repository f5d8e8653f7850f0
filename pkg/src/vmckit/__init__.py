"""Variational Monte Carlo and scale-invariant supervised fitting toolkit."""

__version__ = "0.1.0"
