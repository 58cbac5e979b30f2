"""Exception types shared across the package.

The command line maps these onto exit codes: configuration and format
problems exit with 2, numeric failures with 3.
"""


class ConfigError(ValueError):
    """A parameter, dimension, or precondition is invalid."""


class FormatError(ValueError):
    """A file or serialized payload is malformed."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
