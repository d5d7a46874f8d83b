"""Bayesian neural controlled differential equations for treatment-effect estimation."""

__version__ = "0.1.0"
