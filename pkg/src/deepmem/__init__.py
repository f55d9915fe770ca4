"""Separation-rank verification and deep recurrent network training toolkit."""

__version__ = "0.1.0"
