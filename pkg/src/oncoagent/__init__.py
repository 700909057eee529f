"""Retrieval-augmented, tool-orchestrating agent engine for oncology patient cases."""

__version__ = "0.1.0"
