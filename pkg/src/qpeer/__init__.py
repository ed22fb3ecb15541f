"""Quantile peer effects on networks: simulation, estimation and diagnostics."""

__version__ = "0.1.0"
