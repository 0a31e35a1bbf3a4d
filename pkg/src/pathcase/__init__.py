"""Two-stage slide and case representation learning over patch-feature grids."""

__version__ = "0.1.0"
