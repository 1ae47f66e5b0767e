"""Burst super-resolution laboratory."""

__version__ = "0.1.0"
