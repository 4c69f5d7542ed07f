"""Robustness evaluation of small multi-modal (text + image) fake-news detectors."""

__version__ = "0.1.0"
