"""Variational EM fitting of nonlinear mixed-effects models."""

__version__ = "0.1.0"
