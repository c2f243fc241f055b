"""Crossbar behavioral simulation and fault-free matrix compilation."""

__version__ = "0.1.0"
