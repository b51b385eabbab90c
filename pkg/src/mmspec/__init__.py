"""Speculative decoding with context-conditioned drafters at toy scale."""
__version__ = "0.1.0"
