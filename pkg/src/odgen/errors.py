"""Exception types shared across the package.

The CLI maps ValidationError to exit code 1 and NumericalError to exit
code 2; everything else is an ordinary crash.
"""


class ValidationError(ValueError):
    """Bad inputs: shape mismatches, out-of-range parameters, malformed files."""


class NumericalError(ArithmeticError):
    """Non-finite or degenerate values encountered during computation."""
