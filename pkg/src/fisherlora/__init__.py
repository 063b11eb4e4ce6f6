"""Fisher-guided low-rank adapter initialization at desk scale."""

__version__ = "0.1.0"
