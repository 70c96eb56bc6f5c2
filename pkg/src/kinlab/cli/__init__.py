"""Command-line interface: configuration, persistence and the acceptance suite."""

from .main import main

__all__ = ["main"]
