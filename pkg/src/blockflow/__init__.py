"""Conditional generation of single-cell expression with gene-block attention,
a conditional VAE and latent flow matching."""

__version__ = "0.1.0"
