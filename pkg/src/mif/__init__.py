"""Monotonic implicit fields for surface reconstruction from posed LiDAR scans."""

__version__ = "0.1.0"
