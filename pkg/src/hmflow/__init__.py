"""Equivariant harmonic map heat flow into the sphere: simulation and bubble analysis."""

__version__ = "0.1.0"
