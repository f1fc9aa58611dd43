"""Progressive low-rank decomposition of transformer FC layers."""

__version__ = "0.1.0"
