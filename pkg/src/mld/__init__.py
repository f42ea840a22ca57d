"""Latent diffusion over several modalities with one network for joint and conditional generation."""

__version__ = "0.1.0"
