"""Pavement condition assessment: PCI regression, dense captioning, and caption metrics."""

__version__ = "0.1.0"
