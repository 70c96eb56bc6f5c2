"""Numerical and combinatorial laboratory for a tagged-particle kinetic hierarchy."""

__version__ = "0.1.0"
