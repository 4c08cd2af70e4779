"""Hierarchical max-pooling image models, convolutional network classes with
exact structural rewrites, least-squares training with adaptive parameter
selection, and a synthetic geometric-shapes benchmark."""

__version__ = "0.1.0"
