"""Diffusion-coefficient estimation for regularized interacting particle systems."""

__version__ = "0.1.0"
