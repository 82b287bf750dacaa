"""Domain embeddings from disentangled features and Gram statistics."""

__version__ = "0.1.0"
