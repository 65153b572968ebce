"""Desk-scale unsupervised phoneme recognition via adversarial training."""

__version__ = "0.1.0"
