"""Population growth mapping from bi-temporal multispectral patches."""

__version__ = "0.1.0"
