"""Exception hierarchy shared by the compute modules and the CLI."""


class InvfamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(InvfamError, ValueError):
    """Two objects live on incompatible state spaces."""


class NormalizationError(InvfamError, ValueError):
    """A vector or matrix row is not a probability distribution."""


class ParameterError(InvfamError, ValueError):
    """A numeric parameter is outside its admissible range."""


class EmptyDomainError(InvfamError, ValueError):
    """Every state carries an infinite weight, so the requested supremum is empty."""


class TimeOrderError(InvfamError, ValueError):
    """A transition was requested backwards in time."""


class RangeError(InvfamError, IndexError):
    """A time lies outside the stored window of a family."""


class ModelDefinitionError(InvfamError):
    """A user-supplied schedule or coefficient callback failed or misbehaved."""


class InconsistentFamilyError(InvfamError):
    """Pushing a family from two different base points gave different measures."""


class NonUniqueFamilyError(InvfamError):
    """Backward limits from distinct start states do not agree."""

    def __init__(self, message, spread=None, time=None):
        super().__init__(message)
        self.spread = spread
        self.time = time


class ConstantsError(InvfamError):
    """The contraction constants could not be derived at the requested level set."""

    def __init__(self, message, profile=None, R=None):
        super().__init__(message)
        self.profile = profile or []
        self.R = R


class BlowUpError(InvfamError, FloatingPointError):
    """An SDE path produced a non-finite value."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


class GridTooSmallError(InvfamError):
    """Too much simulated mass left the histogram grid."""

    def __init__(self, message, overflow=None):
        super().__init__(message)
        self.overflow = overflow


class ConfigError(InvfamError):
    """An experiment configuration failed validation."""
