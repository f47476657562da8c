"""Exception types raised across the package."""


class SFSetError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SFSetError, ValueError):
    pass


class ZeroProbabilityObservation(SFSetError):
    """Conditioning on an observation whose probability is (numerically) zero."""


class SingularCoreTests(SFSetError):
    pass


class EnumerationTooLarge(SFSetError):
    pass


class DegenerateMixture(SFSetError):
    pass


class EmptySet(SFSetError, ValueError):
    pass


class InfeasibleTarget(SFSetError):
    """A feature-matching target lies outside the achievable set."""

    def __init__(self, message, distance=None, nearest=None):
        super().__init__(message)
        self.distance = distance
        self.nearest = nearest


class DimensionUnsupported(SFSetError, ValueError):
    pass
