"""Hybrid pixel/image supervision for tiled gigapixel slide classification."""

__version__ = "0.1.0"
