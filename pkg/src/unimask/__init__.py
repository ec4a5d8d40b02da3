"""Unified absorbing-state discrete diffusion over grid images and captions."""

__version__ = "0.1.0"
