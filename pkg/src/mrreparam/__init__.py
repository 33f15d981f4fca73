"""MR image re-parameterization: synthetic spin-echo data, autoencoder + Param-Net."""

__version__ = "0.1.0"
