"""Centroid field codec: disk heatmaps, KeyCentroid and MaskCentroid fields."""
from __future__ import annotations

__version__ = "0.1.0"
