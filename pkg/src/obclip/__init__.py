"""Contrastive alignment on oblique-manifold embeddings."""

__version__ = "0.1.0"
