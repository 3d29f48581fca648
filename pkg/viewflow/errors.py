from __future__ import annotations


class ViewflowError(Exception):
    """Base class for all errors raised by :mod:`viewflow`."""


class ConfigurationError(ViewflowError, ValueError):
    """Shapes or settings that do not fit together."""


class DataError(ViewflowError, ValueError):
    """A value outside the domain an operation accepts."""


class UsageError(ViewflowError, ValueError):
    """An invocation that cannot produce a meaningful result."""


class NonFiniteError(ViewflowError, FloatingPointError):
    """A tensor picked up NaN or Inf from finite inputs."""


class CheckpointFormatError(ViewflowError):
    """A checkpoint file that cannot be decoded."""


class TrainingDivergedError(ViewflowError):
    """The training loss became non-finite."""

    def __init__(self, iteration: int, diagnostic_path: str | None = None):
        message = f"non-finite loss at iteration {iteration}"
        if diagnostic_path:
            message += f" (diagnostic checkpoint: {diagnostic_path})"
        super().__init__(message)
        self.iteration = iteration
        self.diagnostic_path = diagnostic_path
