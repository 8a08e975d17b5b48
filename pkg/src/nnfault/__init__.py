"""Bit-level fault injection for small numpy neural networks."""

__version__ = "0.1.0"
