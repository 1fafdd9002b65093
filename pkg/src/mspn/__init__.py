"""Multi-stage spatially-sensitive pooling networks for script identification."""

__version__ = "0.1.0"
