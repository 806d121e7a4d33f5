"""Surrogate-based plant optimisation with a Mahalanobis operating-envelope constraint."""

__version__ = "0.1.0"
