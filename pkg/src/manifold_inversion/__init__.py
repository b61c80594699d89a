"""Gradient and manifold geometry of generative model inversion, at desk scale."""

__version__ = "0.1.0"
