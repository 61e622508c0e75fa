"""Capability-supervised metric embeddings for static malware features."""

__version__ = "0.1.0"
