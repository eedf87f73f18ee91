"""Exception types shared across the package.

The CLI maps ``ConfigError`` and ``StructuralError`` to exit code 2 and
``NumericalError`` to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class StructuralError(ValueError):
    """Inputs whose shapes or index sets do not fit together."""


class NumericalError(RuntimeError):
    """A numerical stage could not produce a usable result."""
