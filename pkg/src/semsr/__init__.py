"""Segmentation-aware GAN super-resolution on a synthetic aerial-style corpus."""

__version__ = "0.1.0"
