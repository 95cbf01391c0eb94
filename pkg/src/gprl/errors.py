"""Shared exception types."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration or missing referenced artifact (CLI exit 1)."""


class NumericalAbort(RuntimeError):
    """Non-finite value during an optimization loop (CLI exit 2)."""

    def __init__(self, message: str, iteration: int | None = None,
                 trace: list[float] | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace or []
