"""
Error types for the pipeline training simulator.
Library modules raise these; the experiment layer turns them into per-run results.
"""

from typing import Any, Dict, Optional


class SimulationError(Exception):
    """Base class for every simulator failure."""


class ConfigError(SimulationError, ValueError):
    """Invalid configuration value or incompatible shapes."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class NumericalError(SimulationError, FloatingPointError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({details})" if details else message)


class SaturationError(SimulationError):
    """Device saturation crossed the configured limit under the abort policy."""

    def __init__(self, message: str, report: Optional[Dict[str, Any]] = None):
        self.report = report or {}
        super().__init__(message)


class StalenessError(SimulationError, AssertionError):
    """A forward event observed the wrong weight version. Always a simulator bug."""
