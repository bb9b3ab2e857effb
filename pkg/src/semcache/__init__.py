"""Centroid-based semantic cache with SLO-aware retrieval-threshold control."""

__version__ = "0.1.0"
