"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Bad user input: inconsistent parameters, missing files, malformed configs."""


class NumericalError(ArithmeticError):
    """A numerical step could not produce a meaningful result."""
