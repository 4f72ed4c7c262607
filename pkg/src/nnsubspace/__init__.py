"""Adaptive neural-network-subspace Galerkin solver for 2D elliptic problems."""

__version__ = "0.1.0"
