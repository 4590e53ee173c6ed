"""Exception types raised across the package."""


class VolSurfError(Exception):
    """Base class for all package errors."""


class DomainError(VolSurfError, ValueError):
    pass


class OutOfBandError(VolSurfError, ValueError):
    """Target price outside the no-arbitrage band of the option."""


class ConvergenceError(VolSurfError, RuntimeError):
    pass


class NumericalOverflowError(VolSurfError, OverflowError):
    pass


class DegenerateMaskError(VolSurfError, ValueError):
    """A mask with no observed entries where at least one is required."""


class SamplingBudgetError(VolSurfError, RuntimeError):
    pass


class GenerationError(VolSurfError, RuntimeError):
    """Pricing or inversion failure at a specific grid coordinate."""

    def __init__(self, message, tenor_index=None, strike_index=None):
        super().__init__(message)
        self.tenor_index = tenor_index
        self.strike_index = strike_index


class FormatError(VolSurfError, ValueError):
    """Unreadable file layout or unsupported format version."""


class ChecksumError(FormatError):
    pass


class ConfigMismatchError(VolSurfError, ValueError):
    pass


class ShapeError(VolSurfError, ValueError):
    pass


class AllMaskedError(VolSurfError, ValueError):
    """Transformer input with no observed tokens in some sample."""


class NoMissingPointsError(VolSurfError, ValueError):
    pass


class DivergenceError(VolSurfError, FloatingPointError):
    pass


class OptimizerError(VolSurfError, RuntimeError):
    pass


class ModelKindError(VolSurfError, TypeError):
    """Operation not supported by this model architecture."""
