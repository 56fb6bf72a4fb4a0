"""Fundus-specific pretraining and evaluation framework."""

__version__ = "0.1.0"
