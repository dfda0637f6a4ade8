"""Factored human-object interaction detection on precomputed detector outputs."""

__version__ = "0.1.0"
