"""Trainable bidirectional cascaded CNN for pavement distress classification."""

__version__ = "0.1.0"
