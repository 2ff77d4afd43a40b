"""Stability-certified GRU identification with offset-free nonlinear MPC."""

__version__ = "0.1.0"
