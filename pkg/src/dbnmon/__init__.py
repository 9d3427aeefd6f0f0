"""Monitoring discrete dynamic Bayesian networks with exact, particle,
Boyen-Koller and factored-particle filters."""

__version__ = "0.1.0"
