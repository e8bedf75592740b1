"""Mean-field limit tools for Coulomb/Euler dynamics on the torus."""

__version__ = "0.1.0"
