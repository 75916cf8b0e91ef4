"""Segmentation-guided multi-instance primitive fitting on range images."""

__version__ = "0.1.0"
