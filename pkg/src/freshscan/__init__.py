"""freshscan: survey pipeline for fresh impact features in raster archives."""

__version__ = "0.1.0"
