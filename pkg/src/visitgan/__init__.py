"""Conditional Wasserstein GAN for multi-label visit-sequence generation."""

__version__ = "0.1.0"
