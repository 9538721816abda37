"""Equivariant interatomic networks trained with force-conditioned denoising."""

__version__ = "0.1.0"
