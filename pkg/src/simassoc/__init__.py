"""Appearance-only multi-object association with a learned similarity decoder."""

__version__ = "0.1.0"
