"""Discover recurring visual trends in large timestamped, geolocated image collections."""

__version__ = "0.1.0"
