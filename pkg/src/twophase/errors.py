"""Exception types shared across the package."""


class TwoPhaseError(Exception):
    """Base class for all package errors."""


class ConfigError(TwoPhaseError, ValueError):
    """Invalid model, design, or experiment configuration."""


class UnsupportedError(TwoPhaseError):
    """Requested quantity has no closed form and cannot be enumerated."""


class EnumerationCapError(TwoPhaseError):
    """Enumeration would exceed the configured cap."""

    def __init__(self, required: int, cap: int, what: str = "cells"):
        self.required = required
        self.cap = cap
        super().__init__(f"enumeration needs {required} {what}, cap is {cap}")


class ConvergenceError(TwoPhaseError):
    """Root finder did not converge."""


class SingularJacobianError(TwoPhaseError):
    """Jacobian is singular or too ill-conditioned to invert."""
