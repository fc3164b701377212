"""Deterministic simulator for the Snappy fast on-chain payment protocol."""

__version__ = "0.1.0"
