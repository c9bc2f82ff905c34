"""Micro-expression spotting and recognition with selective state-space models."""

__version__ = "0.1.0"
