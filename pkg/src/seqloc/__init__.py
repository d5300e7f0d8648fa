"""Indoor localization by sequential classification of the location space."""

__version__ = "0.1.0"
