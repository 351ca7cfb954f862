"""LOD1 building reconstruction from classified LiDAR and footprint masks."""

__version__ = "0.1.0"
