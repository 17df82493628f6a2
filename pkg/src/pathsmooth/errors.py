"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`PathsmoothError` so
callers (notably the CLI) can map failures onto exit codes without matching
on message strings.
"""

from __future__ import annotations


class PathsmoothError(Exception):
    """Base class for all package errors."""


class ConfigError(PathsmoothError):
    """Bad user input: unknown model, malformed config file, invalid flag."""


class DiffusionDegeneracyError(PathsmoothError):
    """Sigma = sigma sigma^T failed to be symmetric positive definite."""


class JumpOverflowError(PathsmoothError):
    """A simulated jump record exceeded the configured event cap."""


class DegenerateInitializationError(PathsmoothError):
    """Every initial particle received zero likelihood."""


class ParticleCollapseError(PathsmoothError):
    """All particle weights vanished at some assimilation step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"all particle weights are zero at step {step}")


class NumericalDivergenceError(PathsmoothError):
    """A parameter trajectory left the numerically trustworthy region."""


class StreamMismatchError(PathsmoothError):
    """Two tracks being compared were fed observation streams of different length."""
