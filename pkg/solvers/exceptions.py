"""
Solver Error Categories
Exception types raised by the solver modules and mapped to exit codes by the CLI.
"""

from typing import Dict, List, Optional


class VolterraError(Exception):
    """Base class for all solver errors."""


class InadmissibleError(VolterraError, ValueError):
    """A weight/discount pair or hypothesis lies outside its admissibility domain."""

    def __init__(self, message: str, margin: Optional[float] = None, clause: Optional[str] = None):
        super().__init__(message)
        self.margin = margin
        self.clause = clause


class ConvergenceError(VolterraError, RuntimeError):
    """Fixed-point iteration failed to contract."""

    def __init__(self, message: str, trace: Optional[List[Dict]] = None):
        super().__init__(message)
        self.trace = trace or []


class MemoryBudgetError(VolterraError, MemoryError):
    """Requested arrays exceed the configured memory budget."""


class ConfigError(VolterraError, ValueError):
    """Malformed problem specification or command-line flag."""


class HorizonError(VolterraError, ValueError):
    """Truncation horizon cannot be determined from the free term's tail."""


class NonFiniteError(VolterraError, FloatingPointError):
    """A recursion produced NaN or infinite values."""
