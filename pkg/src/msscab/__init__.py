"""Multispectral apple-scab preprocessing, band selection, pixel classification and detection metrics."""

__version__ = "0.1.0"
