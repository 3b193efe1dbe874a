"""Radar Fusion - multi-stage sampling fusion of 4D radar and camera features."""

__version__ = "0.4.0"
