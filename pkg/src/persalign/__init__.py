"""Simulation laboratory for personalized preference alignment with shared
bilinear representations and per-user heads."""

__version__ = "0.1.0"
