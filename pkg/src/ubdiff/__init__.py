"""Paired velocity/seismic generation from unbalanced data via co-latent diffusion."""

__version__ = "0.1.0"
