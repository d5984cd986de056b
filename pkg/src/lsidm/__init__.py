"""Joint location-scale mixed model and illness-death model for interval-censored data."""

__version__ = "0.1.0"
