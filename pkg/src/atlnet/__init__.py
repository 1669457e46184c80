"""Spectral-spatial stacked sparse autoencoders with active transfer learning for hyperspectral scenes."""

__version__ = "0.1.0"
