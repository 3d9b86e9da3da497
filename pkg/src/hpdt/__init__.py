"""Hierarchical prompt decision transformer for offline meta-RL at desk scale."""

__version__ = "0.1.0"
