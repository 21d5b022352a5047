"""Unified discriminative + generative visual-dialog transformer with inter-task contrastive losses."""
__version__ = "0.1.0"
