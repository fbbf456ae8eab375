"""Robust sound event detection for bioacoustic sensor networks."""

__version__ = "0.1.0"
