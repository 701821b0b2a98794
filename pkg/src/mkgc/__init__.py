"""Multilingual knowledge-graph completion with shared entity embeddings and relation alignment."""

__version__ = "0.1.0"
