"""Interactive object-aware image-to-audio generation at desk scale."""

__version__ = "0.1.0"
