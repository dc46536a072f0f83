"""Spatio-temporal graph transformer for ice-layer thickness prediction."""

__version__ = "0.1.0"
