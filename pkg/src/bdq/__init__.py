"""Lattice Boue-Dupuis control for 2D Euclidean fields."""

__version__ = "0.1.0"
