# app/core/errors.py
from __future__ import annotations

from typing import Any


class MacPowerError(Exception):
    pass


class DomainError(MacPowerError, ValueError):
    """Argument outside the mathematical domain (negative gain, nonpositive moment, ...)."""


class SpecValidationError(MacPowerError, ValueError):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.message = message
        self.path = path

    def nested(self, prefix: str) -> "SpecValidationError":
        """Same error with its path placed under prefix."""
        return SpecValidationError(self.message, f"{prefix}.{self.path}" if self.path else prefix)


class RegularityViolation(MacPowerError):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message)
        self.details = details or {}


class SearchFailure(MacPowerError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EnumerationCapExceeded(MacPowerError):
    def __init__(self, joint_states: int, cap: int, hint: str = "use method 'mc' or 'convolve'"):
        super().__init__(f"Exact enumeration needs {joint_states} joint states (cap {cap}); {hint}.")
        self.joint_states = joint_states
        self.cap = cap


class DegenerateLevelError(MacPowerError):
    pass
