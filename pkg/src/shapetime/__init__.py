"""Probabilistic displacement-field shape models with Fisher-information time uncertainty."""

__version__ = "0.1.0"
