"""Multi-label text classification with encoder-decoder transformers, built on numpy."""

__version__ = "0.1.0"
