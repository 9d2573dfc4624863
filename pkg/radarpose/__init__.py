"""Radar human pose refinement with a conditional diffusion model."""

__version__ = '0.1.0'
