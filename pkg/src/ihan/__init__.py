"""Interpretable hierarchical attention networks for patient risk prediction."""

__version__ = "0.1.0"
