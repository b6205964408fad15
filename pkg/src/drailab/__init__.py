"""Desk-scale lab for conditional generation with dual adversarial inference."""

__version__ = "0.1.0"
