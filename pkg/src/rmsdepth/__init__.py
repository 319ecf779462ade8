"""Radar-modulated selective scans for sparse-to-dense depth completion."""

__version__ = "0.1.0"
