"""Dual-path state-space video segmentation with spectral gate refinement."""

__version__ = "0.1.0"
