"""Federated feature fusion: isolated local embeddings, one-round latent
sharing, and a server-side fused model with learnable dimension alignment
and a learned consensus graph."""

__version__ = "0.1.0"

from . import numcore

__all__ = ["numcore", "__version__"]
