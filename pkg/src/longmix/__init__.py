"""Longitudinal linear mixed-effects models for panel data."""
__version__ = "0.1.0"
