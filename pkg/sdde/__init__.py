"""Simulation and prediction-based estimation for affine stochastic delay differential equations."""

__version__ = "0.1.0"
