"""Cascaded polar-transform segmentation of elliptical structures in 2D slices."""

__version__ = "0.1.0"
