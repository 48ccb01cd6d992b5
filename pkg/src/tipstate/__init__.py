"""Tip-state classification toolkit for scanning probe microscopy images."""

__version__ = "0.1.0"
