"""Exception hierarchy shared across the toolkit.

Each class carries the CLI exit code it maps to.
"""


class CamalError(Exception):
    exit_code = 1


class ConfigError(CamalError, ValueError):
    exit_code = 2


class ValidationError(ConfigError):
    """Config keys that do not match the schema."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class DataError(CamalError):
    exit_code = 3


class PairingError(DataError):
    pass


class FormatError(DataError):
    pass


class DegenerateMaskError(DataError):
    pass


class StratificationError(DataError):
    pass


class GenerationError(DataError):
    pass


class ShapeError(CamalError, ValueError):
    exit_code = 2


class DomainError(CamalError, ValueError):
    exit_code = 3


class InsufficientDataError(DomainError):
    pass


class LinkageError(CamalError, RuntimeError):
    """Captured features are not part of the graph that produced the target scalar."""

    exit_code = 4


class NumericError(CamalError, FloatingPointError):
    exit_code = 4


class UnsupportedError(CamalError, ValueError):
    exit_code = 2


class OutputExistsError(ConfigError):
    """Refusal to write into a non-empty output directory without --force."""
