"""Reprogramming a frozen vision-language model for deepfake detection."""
__version__ = "0.1.0"
