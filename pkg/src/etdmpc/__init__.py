"""Ensemble-averaged, mixed-horizon MPPI planning on small latent world models."""

__version__ = "0.1.0"
