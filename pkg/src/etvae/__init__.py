"""Semi-supervised rotation-equivariant VAE for galaxy vote-fraction prediction."""

__version__ = "0.1.0"
