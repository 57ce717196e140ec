"""Dual history+text guided diffusion forecasting for event-related signals."""

__version__ = "0.1.0"
