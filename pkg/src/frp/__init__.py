"""Pedestrian false-positive reduction for two-stage detectors, at toy scale."""

__version__ = "0.1.0"
