"""Harness for LLM-driven proof-of-concept exploit generation and validation."""

__version__ = "0.1.0"
