"""Exception hierarchy.

The CLI maps every error onto one of three categories (config, io, numeric)
through the ``category`` class attribute.
"""


class PfodeError(Exception):
    category = "numeric"


class DimensionError(PfodeError, ValueError):
    """Shapes of two operands (or a volume and its model) disagree."""


class DomainError(PfodeError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateInputError(DomainError):
    """Zero-variance or otherwise degenerate statistical input."""


class ConfigError(PfodeError, ValueError):
    category = "config"


class FormatError(PfodeError, IOError):
    """Malformed on-disk file (bad magic, truncated payload, ...)."""

    category = "io"


class TrainingError(PfodeError, RuntimeError):
    pass
