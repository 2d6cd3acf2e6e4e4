"""Dual-flow generative ranking with HSTU blocks."""

__version__ = "0.1.0"
