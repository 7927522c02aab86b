"""Texture- and attention-guided protective perturbations against image editing models."""

__version__ = "0.1.0"
