"""Exception hierarchy.

Two families matter to callers (and to the CLI exit codes): problems with
what the user supplied, and numerical failures during estimation.
"""
from __future__ import annotations


class CtPanelError(Exception):
    """Base class for all package errors."""


class UserInputError(CtPanelError, ValueError):
    """Bad data, configuration or arguments."""


class EstimationError(CtPanelError, ArithmeticError):
    """Numerical failure: singularity, identification, degeneracy."""


# data / panel
class SchemaError(UserInputError):
    pass


class DuplicateKeyError(UserInputError):
    pass


class ParseError(UserInputError):
    pass


class SupportError(UserInputError):
    pass


class InsufficientPeriodsError(UserInputError):
    pass


class EmptyPeriodError(UserInputError):
    pass


class ShapeError(UserInputError):
    pass


class RangeError(UserInputError):
    pass


class SpecificationError(UserInputError):
    pass


class WeightingError(UserInputError):
    pass


class WrongPathError(UserInputError):
    pass


class NotApplicableError(UserInputError):
    pass


class DgpSpecError(UserInputError):
    pass


# graphs
class DagError(UserInputError):
    pass


class CycleError(DagError):
    def __init__(self, message, cycle=()):
        super().__init__(message)
        self.cycle = tuple(cycle)


class NodeReferenceError(DagError):
    pass


class PathError(DagError):
    pass


class ArgumentError(DagError):
    pass


# numerical
class CollinearityError(EstimationError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class IdentificationError(EstimationError):
    pass


class NumericalError(EstimationError):
    pass


class ResamplingFragilityError(EstimationError):
    pass


class DegenerateVarianceWarning(RuntimeWarning):
    """Computed sandwich variance is not strictly positive."""
