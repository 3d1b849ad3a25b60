"""Exception types shared across the package."""

from __future__ import annotations


class FedSegError(Exception):
    """Base class for all package errors."""


class ShapeError(FedSegError, ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class NonFiniteError(FedSegError, FloatingPointError):
    """A NaN or Inf appeared in a loss or gradient."""


class ConfigError(FedSegError, ValueError):
    """Invalid configuration value."""


class ManifestError(FedSegError, ValueError):
    """Malformed dataset manifest."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(FedSegError, RuntimeError):
    """A client's local training produced a non-finite loss."""

    def __init__(self, client_id: int, step: int, message: str = "non-finite loss"):
        super().__init__(f"client {client_id} diverged at step {step}: {message}")
        self.client_id = client_id
        self.step = step


class CheckpointError(FedSegError, ValueError):
    """Corrupt or incompatible checkpoint file."""
