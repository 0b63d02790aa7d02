"""Exception hierarchy for mpfgvc.

Library code raises these; only the CLI turns them into exit codes.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class MpfgvcError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MpfgvcError, ValueError):
    """Invalid configuration value, unknown key or unmet precondition."""


class DimensionError(MpfgvcError, ValueError):
    """Operand shapes do not fit the operation."""


class NumericError(MpfgvcError, ArithmeticError):
    """NaN/inf where finite values are required."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DegenerateInputError(MpfgvcError, ValueError):
    """Input is mathematically degenerate (e.g. a zero-norm vector)."""


class ContractError(MpfgvcError, RuntimeError):
    """A calling contract was violated."""


class LabelIndexError(MpfgvcError, IndexError):
    """Label or class index outside [0, C)."""


class FormatError(MpfgvcError, ValueError):
    """On-disk artefact does not match the expected layout."""

    def __init__(self, path: Any, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)
