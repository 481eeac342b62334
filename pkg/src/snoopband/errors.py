"""Exception types raised across the package."""


class SnoopbandError(Exception):
    """Base class for all package errors."""


class SingularMoments(SnoopbandError):
    """Moment matrix of a kernel/order pair is not invertible."""


class CholeskyFailure(SnoopbandError):
    """Covariance could not be factorized even after maximal jitter."""


class DomainError(SnoopbandError, ValueError):
    """Argument outside the domain of an asymptotic formula."""


class InsufficientData(SnoopbandError):
    """Too few observations with positive kernel weight."""


class IllConditioned(SnoopbandError):
    """Weighted design too close to singular for the requested order."""


class WeakFirstStage(SnoopbandError):
    """Jump in treatment probability is numerically zero."""


class InsufficientNeighbors(SnoopbandError):
    """Too few same-side units for the nearest-neighbor variance."""


class MissingOracle(SnoopbandError):
    """Exact variance requested without a conditional-variance function."""


class NotExcludedPointwise(SnoopbandError):
    """The pointwise interval already contains the value to exclude."""


class OverlappingWindows(SnoopbandError):
    """Instrument windows at the two ends of the support overlap."""


class NoFirstStage(SnoopbandError):
    """Treatment rates in the two instrument windows coincide."""


class EmptyTrimSet(SnoopbandError):
    """No observation has propensity score inside [h, 1-h]."""


class SchemaMismatch(SnoopbandError):
    """CSV header does not match the expected columns."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ParseError(SnoopbandError):
    """A CSV row could not be parsed as finite reals."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
