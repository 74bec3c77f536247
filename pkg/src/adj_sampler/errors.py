"""Exception types shared across the package."""

from __future__ import annotations


class ContractViolationError(ValueError):
    """An argument violated a documented precondition."""


class SingularConfigurationError(ValueError):
    """A particle configuration has (near-)coincident particles."""


class DivergedTrajectoryError(RuntimeError):
    """An SDE rollout produced a non-finite or runaway state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"trajectory diverged at step {step}")


class ConfigError(ValueError):
    """Configuration parsing or validation failed.

    ``key`` carries the offending dotted key path when known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)
