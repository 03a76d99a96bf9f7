"""
PSMT — Exception types shared across packages.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration value, unknown key, or shape precondition failure."""


class DataError(RuntimeError):
    """A dataset file is missing, unreadable, or inconsistent with its index."""

    def __init__(self, path, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class NonFiniteError(FloatingPointError):
    """NaN/Inf met during a numerical routine; carries where it happened."""

    def __init__(self, message: str, iteration: int | None = None) -> None:
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingAborted(RuntimeError):
    """Raised by the trainer after writing a diagnostic dump."""

    def __init__(self, message: str, dump_path: str | None = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path
