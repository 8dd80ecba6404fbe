"""Conditional latent-diffusion toolkit on procedurally generated brain phantoms."""

__version__ = "0.1.0"
