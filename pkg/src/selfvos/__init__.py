"""Self-supervised video object segmentation via dense correspondence."""

__version__ = "0.1.0"
