"""Calibration-aware structured pruning toolkit."""

__version__ = "0.1.0"
