"""Discrete-event simulator of a production grid testbed."""

__version__ = "0.1.0"
