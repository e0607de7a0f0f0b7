"""Exception types shared across the package."""


class BrassError(Exception):
    """Base class for all package-specific errors."""


class DegenerateDistributionError(BrassError):
    """A distribution slice carries no probability mass where some is required."""


class AxisMismatchError(BrassError):
    """Named axes of two tables are incompatible for the requested operation."""


class AbsoluteContinuityError(BrassError):
    """KL divergence requested where the reference assigns zero mass to a
    point of positive probability."""


class UndefinedSpecializationError(BrassError):
    """Specialization is undefined for a one-element choice space."""


class WiringError(BrassError):
    """A node references variables that do not exist or are not yet defined."""


class SequencingError(BrassError):
    """Selectors or inputs do not respect the feed-forward ordering."""


class UnsupportedDepthError(BrassError):
    """Architecture enumeration requested beyond the supported depth."""


class SupportCollapseError(BrassError):
    """A Boltzmann update produced an all-zero slice."""


class ConstructionError(BrassError):
    """A generated artifact failed its hard construction assertion."""


class ParameterError(BrassError):
    """An argument is outside its documented domain."""


class MissingSolutionError(BrassError):
    """An operation needs a solved system but none was supplied."""


class EmptySelectionError(BrassError):
    """An export or chart was requested over an empty record selection."""


class ConvergenceError(BrassError):
    """Strict mode only: iteration ended without reaching the tolerance."""
