"""Exception types shared across the package.

Each class maps to a distinct CLI exit code, so failures stay
distinguishable from scripts.
"""


class LindriveError(Exception):
    """Base class for all package errors."""


class ShapeError(LindriveError, ValueError):
    """Array dimensions are inconsistent with the operation's contract."""


class ConfigError(LindriveError, ValueError):
    """Invalid configuration value (unknown mode, probability out of range, ...)."""


class ContractError(LindriveError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(LindriveError, ArithmeticError):
    """Non-finite values reached a numeric kernel."""


class DataError(LindriveError, ValueError):
    """Input data is unusable (too few samples, degenerate scene, ...)."""
