"""Diverse-target supervision and domain contribution balancing for multi-domain training."""

__version__ = "0.1.0"
