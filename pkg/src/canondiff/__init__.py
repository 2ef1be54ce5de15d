"""Diffusion models over point clouds with learned canonicalization."""

__version__ = "0.1.0"
