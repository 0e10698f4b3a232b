"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CtcamError(Exception):
    exit_code = 2


class ConfigError(CtcamError, ValueError):
    """Invalid parameters or configuration (usage error)."""

    exit_code = 1


class DataError(CtcamError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class InputTooShortError(DataError):
    pass


class ShapeError(DataError):
    pass


class StaleCacheError(DataError):
    pass


class UnknownLabelError(DataError, KeyError):
    pass


class NotCTCError(DataError):
    pass


class EmptyAlignmentError(DataError):
    """No path through the alignment graph fits the available frames."""


class NoPathsError(DataError):
    pass


class NoHypothesisError(DataError):
    pass


class LexiconGapError(DataError):
    pass


class UncoveredPhoneError(DataError):
    pass


class NumericalError(CtcamError, ArithmeticError):
    exit_code = 3
