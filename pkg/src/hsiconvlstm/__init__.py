"""Spatial-spectral ConvLSTM networks for hyperspectral image classification."""

__version__ = "0.1.0"
