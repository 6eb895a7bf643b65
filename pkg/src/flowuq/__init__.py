"""Conditional normalizing flows for amortised and per-observation posterior
inference in inverse problems."""

__version__ = "0.1.0"
