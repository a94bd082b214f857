"""Geometric core for monocular 6D pose estimation of articulated hand tools."""

__version__ = "0.1.0"
