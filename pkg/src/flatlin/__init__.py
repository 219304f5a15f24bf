"""Quasi-static feedback linearization of minimally underactuated,
configuration-flat Lagrangian systems."""

__version__ = "0.1.0"
