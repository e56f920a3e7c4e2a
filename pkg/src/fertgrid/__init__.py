"""Crop fertilizer application rates: prediction, explanation, reconciliation and gridding."""

__version__ = "0.1.0"
