"""Exception hierarchy shared by every fedsim module."""

from __future__ import annotations


class FedsimError(Exception):
    """Base class for all errors raised by fedsim."""


class StructuralError(FedsimError, ValueError):
    """Shapes, segment layouts or graph structure do not line up."""


class ParameterError(FedsimError, ValueError):
    """A numeric hyperparameter is outside its valid range."""


class DataError(FedsimError, ValueError):
    """Input data violates a precondition (bad label, empty set, ...)."""


class FormatError(FedsimError, ValueError):
    """A file on disk does not follow the expected layout."""


class PartitionError(FedsimError):
    """A partition with the requested constraints could not be produced."""


class ConfigError(FedsimError, ValueError):
    """Invalid experiment or strategy configuration.

    ``field`` carries the dotted path of the offending key when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class RoundError(FedsimError, RuntimeError):
    """Every client in a round aborted, so no aggregate exists."""


class GradCheckError(FedsimError, ArithmeticError):
    """Finite-difference check hit a non-finite loss."""

    def __init__(self, message: str, coordinate: int | None = None):
        self.coordinate = coordinate
        super().__init__(message)
