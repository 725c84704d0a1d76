"""Mamba decoder with cross-attention for codec-token speech editing and continuation."""

__version__ = "0.1.0"
