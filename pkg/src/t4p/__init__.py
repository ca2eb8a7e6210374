"""Test-time training for multi-agent trajectory prediction on synthetic driving scenes."""

__version__ = "0.1.0"
