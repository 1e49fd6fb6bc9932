"""Exception hierarchy shared across the package."""


class JMHError(Exception):
    """Base class for all package errors."""


class InputError(JMHError):
    """Malformed input data or configuration."""


class DimensionMismatch(InputError):
    pass


class UnknownSubject(InputError):
    pass


class NonIncreasingTimes(InputError):
    pass


class RowAfterEventTime(InputError):
    pass


class NoLongitudinalRows(InputError):
    pass


class MissingColumn(InputError):
    pass


class NotPositiveDefinite(JMHError):
    pass


class LostPositiveDefiniteness(NotPositiveDefinite):
    pass


class DegenerateDensity(JMHError):
    pass


class SingularGram(JMHError):
    pass


class SingularInformation(JMHError):
    def __init__(self, message, null_directions=None):
        super().__init__(message)
        self.null_directions = null_directions


class ZeroDenominator(JMHError):
    pass


class UnsortedCohort(JMHError):
    pass


class NonFiniteLoglik(JMHError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class LandmarkBeyondData(JMHError):
    pass


class EmptyHistory(JMHError):
    pass


class EmptyGroup(JMHError):
    pass


class InsufficientRiskSet(JMHError):
    pass
