"""Intra- plus inter-session network coding lab: optimizer, coding, simulator."""

__version__ = "0.1.0"
