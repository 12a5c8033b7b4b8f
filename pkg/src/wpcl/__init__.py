"""Partial contrastive representation learning for instruction-following navigation on a synthetic grid world."""

__version__ = "0.1.0"
