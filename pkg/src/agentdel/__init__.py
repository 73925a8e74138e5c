"""Authenticated delegation of authority from human users to AI agents."""

__version__ = "0.1.0"
