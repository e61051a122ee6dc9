"""Feature-metric direct alignment for camera localization."""

__version__ = "0.1.0"
