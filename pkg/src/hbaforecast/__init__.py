"""Hierarchical Bayesian analog forecasting of count fields."""

__version__ = "0.1.0"
