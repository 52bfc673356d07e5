"""Logic policies over learned, language-aligned spatial concepts."""

__version__ = "0.1.0"
