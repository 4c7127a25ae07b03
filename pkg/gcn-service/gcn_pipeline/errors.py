"""
errors.py
=========
Exception hierarchy shared by every gcn_pipeline module.

The CLI maps these onto exit codes (see ``main.py``):
  ConfigError              → 1
  DatasetError             → 2
  NumericError / NumericDivergenceError → 3
  BenchmarkCheckError      → 4
"""

from __future__ import annotations

from typing import Any, Optional


class AdaptGcnError(Exception):
    """Root of all library errors."""


class DimensionError(AdaptGcnError, ValueError):
    """Operand shapes do not line up."""


class InputError(AdaptGcnError, ValueError):
    """Out-of-range node id, label or argument."""


class NumericError(AdaptGcnError, ArithmeticError):
    """NaN / Inf produced by an operation."""

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message if layer is None else f"{message} (layer: {layer})")
        self.layer = layer


class SupportError(AdaptGcnError, ValueError):
    """A proposal distribution is zero where the target probability is not."""


class ConfigError(AdaptGcnError, ValueError):
    """Invalid or inconsistent configuration."""


class MemoryGuardError(ConfigError):
    """Refused to materialise a dense-ish operator above the configured cap."""


class DatasetError(AdaptGcnError):
    """Base class for dataset problems."""


class DatasetParseError(DatasetError):
    def __init__(self, path: str, line: Optional[int], reason: str):
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class DatasetValidationError(DatasetError):
    """Files parse but violate a dataset invariant."""


class NumericDivergenceError(AdaptGcnError):
    """Training produced a non-finite loss; carries the diagnostic record."""

    def __init__(self, message: str, record: Any = None):
        super().__init__(message)
        self.record = record


class BenchmarkCheckError(AdaptGcnError):
    """A benchmark finished but its node-count check failed; carries the rows."""

    def __init__(self, message: str, rows: Any = None):
        super().__init__(message)
        self.rows = rows
