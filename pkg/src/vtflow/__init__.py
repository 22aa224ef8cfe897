"""Desk-scale unified flow matching over video latents and text embeddings."""

__version__ = "0.1.0"
