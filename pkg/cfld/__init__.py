"""Coarse-to-fine latent diffusion for pose-guided person image synthesis, at desk scale."""

__version__ = "0.1.0"
