"""Valence-arousal regression with label distribution smoothing."""

__version__ = "0.1.0"

SENTINEL = -5.0
