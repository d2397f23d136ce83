"""Center-adaptive multimodal target-volume segmentation toolkit."""

__version__ = "0.1.0"
