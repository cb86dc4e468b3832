"""Exception types raised across the package."""

from __future__ import annotations


class DysAdaptError(Exception):
    """Base class for all package errors."""


class DimensionError(DysAdaptError, ValueError):
    pass


class AlignmentError(DysAdaptError, ValueError):
    pass


class ConfigurationError(DysAdaptError, ValueError):
    pass


class InputTooShortError(DysAdaptError, ValueError):
    pass


class InfeasibleTargetError(DysAdaptError, ValueError):
    pass


class InsufficientFramesError(DysAdaptError, ValueError):
    pass


class EstimationError(DysAdaptError, ValueError):
    pass


class DataError(DysAdaptError, ValueError):
    pass


class FormatError(DysAdaptError, ValueError):
    pass


class UndefinedRateError(DysAdaptError, ValueError):
    pass
