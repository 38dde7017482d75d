"""Multi-material topology optimization of swelling gel-elastomer composites."""

__version__ = "0.1.0"
