"""Diagnose and repair collapsed attention heads in small ALiBi transformers."""

__version__ = "0.1.0"
