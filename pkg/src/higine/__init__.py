"""Hierarchical edge-weighted GIN survival prediction from spatial single-cell tables."""

__version__ = "0.1.0"
