"""Desk-scale try-on diffusion with hybrid-attention garment control."""

__version__ = "0.1.0"
