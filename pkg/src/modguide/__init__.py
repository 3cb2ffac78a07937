"""Modulation-space guidance for diffusion transformers, at desk scale."""

__version__ = "0.1.0"
