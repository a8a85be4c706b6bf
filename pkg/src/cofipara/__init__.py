"""Coarse-to-fine multimodal sarcasm target identification."""

__version__ = "0.1.0"
