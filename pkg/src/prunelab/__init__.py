"""prunelab: a desk-scale layer-pruning laboratory for a toy transformer."""

__version__ = "0.1.0"
