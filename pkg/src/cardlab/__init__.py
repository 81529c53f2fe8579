"""Conditional diffusion (CARD) laboratory: sampling, training and bound checks."""

__version__ = "0.1.0"
