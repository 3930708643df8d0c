"""Toy-scale multi-modality guided image completion with diffusion."""

__version__ = "0.1.0"
