"""Desk-scale composed image retrieval lab: text-only fine-tuning of a text encoder."""

__version__ = "0.1.0"
