"""Desk-scale lab for length-aware attention scaling and distance-bias masks."""

__version__ = "0.1.0"
