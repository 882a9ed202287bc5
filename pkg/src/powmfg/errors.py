"""Exception types raised across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class FitError(ValueError):
    """Curve fitting could not be performed on the supplied samples."""


class CFLError(ValueError):
    """An explicit step was requested with a time step above its stability bound."""

    def __init__(self, dt: float, dt_max: float):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(f"dt={dt:.6g} exceeds the explicit stability bound dt_max={dt_max:.6g}")


class ThinningError(ValueError):
    """Per-step jump probability too large for first-order thinning."""


class SolverError(RuntimeError):
    """A linear solve failed or produced non-finite values."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap.

    ``history`` holds the residual recorded at every iteration.
    """

    def __init__(self, message: str, history=None):
        self.history = list(history or [])
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""
