"""Gaussian-process-guided diffusion policies for offline RL."""

__version__ = "0.1.0"
