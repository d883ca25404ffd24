"""Identification of SDE drift and diffusion from ensemble moments with
residual-based multi-peak sampling."""

__version__ = "0.1.0"
