"""Reflect-, rotate- and scale-equivariant convolution kernels for gait recognition."""

__version__ = "0.1.0"
