"""Learned image codec with trainable binary channel masks and structural pruning."""

__version__ = "0.1.0"
