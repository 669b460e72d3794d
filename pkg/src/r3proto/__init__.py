"""Prototypical-part classifier with reward-model fine-tuning from heatmap ratings."""

__version__ = "0.1.0"
