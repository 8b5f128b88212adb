"""Density-based conformal prediction regions from normalising flows."""

__version__ = "0.1.0"
