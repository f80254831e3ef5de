"""Differentiable Gaussian splatting with windshield-obstruction decomposition."""

__version__ = "0.1.0"
