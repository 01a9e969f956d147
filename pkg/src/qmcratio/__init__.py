"""Ratio-of-integrals estimation with a-posteriori QMC-FEM error control."""

__version__ = "0.1.0"
