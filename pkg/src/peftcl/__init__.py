"""Continual learning with parameter-efficient experts on a small numpy ViT."""

__version__ = "0.1.0"
