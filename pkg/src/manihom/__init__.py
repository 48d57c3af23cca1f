"""Homogenization toolkit for parallelizable manifolds in one periodic chart."""

from . import errors, geometry, nets, partition, fiber, oscillate, homogenize, elliptic

__all__ = [
    "errors", "geometry", "nets", "partition", "fiber",
    "oscillate", "homogenize", "elliptic",
]

__version__ = "0.1.0"
