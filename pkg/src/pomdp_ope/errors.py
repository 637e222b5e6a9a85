"""Exception hierarchy shared by all modules."""


class OPEError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OPEError, ValueError):
    """Inconsistent model, policy, window or experiment configuration."""


class NumericalError(OPEError, ArithmeticError):
    """A solve failed its residual check or produced non-finite output."""


class OverlapError(OPEError, ValueError):
    """Evaluation policy puts mass where the behavior policy has none."""


class CapacityError(OPEError, MemoryError):
    """Exact enumeration would exceed the configured size limit."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class DatasetFormatError(OPEError, ValueError):
    """Malformed or inconsistent dataset file."""


class InsufficientSupportError(OPEError, ValueError):
    """No data matches a quantity that needs it."""


class DegenerateEstimateError(OPEError, ArithmeticError):
    """An estimate cannot be normalized (all mass clipped away)."""
