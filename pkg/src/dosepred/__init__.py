"""Desk-scale 3D dose prediction toolkit."""

__version__ = "0.1.0"
