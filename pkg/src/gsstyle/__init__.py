"""Deterministic desk-scale 3D Gaussian scene stylization toolkit."""

__version__ = "0.1.0"
