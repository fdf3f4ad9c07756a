"""Quantization-aware training of diffractive deep neural networks."""

__version__ = "0.1.0"
