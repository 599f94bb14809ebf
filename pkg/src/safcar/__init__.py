"""Two-pathway compositional action recognition with structured attention fusion."""

__version__ = "0.1.0"
