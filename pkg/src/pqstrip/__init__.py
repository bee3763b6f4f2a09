"""Curvature-aligned planar-quad strip remeshing of developable triangle meshes."""

__version__ = "0.1.0"
