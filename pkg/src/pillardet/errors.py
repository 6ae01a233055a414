"""Exception types shared across the package.

ValidationError maps to CLI exit code 1, InvariantViolation to exit code 2.
"""


class PillarDetError(Exception):
    """Base class for package errors."""


class ValidationError(PillarDetError):
    """Invalid input data, configuration, or file content."""


class InvariantViolation(PillarDetError):
    """An internal consistency check failed."""
