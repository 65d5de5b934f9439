"""Training-free one-shot segmentation engine for promptable segmenters."""

__version__ = "0.1.0"
