"""Exception hierarchy shared across the package.

The CLI maps :class:`InputError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""


class NormVAEError(Exception):
    """Base class for all package errors."""


class InputError(NormVAEError, ValueError):
    """Invalid user-provided input (files, configuration, arguments)."""


class ContractViolation(InputError):
    """A precondition of an operation was not met (shape, range, ordering)."""


class CohortLoadError(InputError):
    """The cohort CSV could not be parsed or failed validation."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ModelFileError(InputError):
    """A model file is truncated, corrupted or has an unsupported version."""


class NumericalError(NormVAEError, ArithmeticError):
    """A numerical failure that invalidates the computation."""


class TrainingDivergedError(NumericalError):
    """Loss or gradients became non-finite during optimization."""


class DegenerateVarianceError(NumericalError):
    """A variance that must be strictly positive evaluated to zero."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)
