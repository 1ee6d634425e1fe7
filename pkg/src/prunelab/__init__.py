"""Prune-and-fine-tune experiments for compact, robust networks."""

__version__ = "0.1.0"
