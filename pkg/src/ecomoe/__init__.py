"""Morphology and controller co-design with a mixture-of-experts universal policy."""

__version__ = "0.1.0"
