"""Arbitrary-scale super-resolution for medical image slices."""
__version__ = "0.1.0"
