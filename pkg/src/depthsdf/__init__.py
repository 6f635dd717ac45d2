"""Depth-guided self-supervised pixel-aligned SDF reconstruction at desk scale."""

__version__ = "0.1.0"
