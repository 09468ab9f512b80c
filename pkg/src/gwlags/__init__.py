"""Groupwise image scheduling and power control for drone-to-base-station uplinks."""

__version__ = "0.1.0"
