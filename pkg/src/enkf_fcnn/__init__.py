"""Ensemble Kalman filter with a neural-network correction for small ensembles."""

__version__ = "0.1.0"
