"""trajlab: a desk-scale lab for style-aligned diffusion trajectory planning."""

__version__ = "0.1.0"
