"""Overlearning audits: train small models, censor their representations,
attack them, and measure what leaks."""

__version__ = "0.1.0"
