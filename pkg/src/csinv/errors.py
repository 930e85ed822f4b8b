"""Exception types shared across the package."""


class CsinvError(Exception):
    """Base class for all package errors."""


class GridError(CsinvError):
    """Invalid grid construction request (spacing, regions, dimensions)."""


class SolveFailure(CsinvError):
    """Iterative solve did not reach the requested tolerance.

    Carries the best iterate seen so far and its relative residual so the
    caller can decide whether to accept, retry or abort.
    """

    def __init__(self, message, iterate=None, residual=None, iterations=None):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual
        self.iterations = iterations


class ConfigError(CsinvError):
    """Malformed or inconsistent scenario configuration."""


class ArtifactError(CsinvError):
    """Missing or unreadable stage artifact (file produced by an earlier stage)."""
