"""Desk-scale multimodal note representation pipeline."""

__version__ = "0.1.0"
