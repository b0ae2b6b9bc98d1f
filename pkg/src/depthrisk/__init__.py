"""Depth-aware accident anticipation from dashcam-style clips."""

__version__ = "0.1.0"
