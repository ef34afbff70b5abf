"""Disentangled-interest CTR prediction with OOD construction and transfer evaluation."""

__version__ = "0.1.0"
