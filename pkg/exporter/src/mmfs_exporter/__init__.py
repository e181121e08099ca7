"""Offline exporter: raw image+description corpus to MMFS v1 embeddings."""

__version__ = "0.1.0"
