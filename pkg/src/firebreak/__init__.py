"""Firebreak placement on gridded landscapes with deep Q-learning from demonstrations."""

__version__ = "0.1.0"
