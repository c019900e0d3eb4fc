"""Concurrent parameter-space exploration on dynamically created instances."""

__version__ = "0.1.0"
