"""Clustering-based knowledge transfer, occluded jigsaw data and HOG features."""

from .rng import Rng

__all__ = ["Rng"]
__version__ = "0.1.0"
