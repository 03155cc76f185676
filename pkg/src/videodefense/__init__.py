"""Frequency-domain adversarial protection for portrait video frames."""

__version__ = "0.1.0"
