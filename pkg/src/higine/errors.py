"""Exception hierarchy.

Exceptions are grouped by the CLI exit code they map to: configuration
problems, data problems and numeric failures.
"""


class HigineError(Exception):
    exit_code = 1


class ConfigError(HigineError, ValueError):
    exit_code = 2


class DataError(HigineError, ValueError):
    exit_code = 3


class NumericError(HigineError, ArithmeticError):
    exit_code = 4


# data
class MissingColumn(DataError):
    pass


class NonFiniteValue(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyCore(DataError):
    pass


class DuplicatePatient(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DoubleFusion(DataError):
    pass


class NoTrainingData(DataError):
    pass


class NoPredictions(DataError):
    pass


class TooFewPatients(DataError):
    pass


class SingleClass(DataError):
    pass


class NoComparablePairs(DataError):
    pass


class NoEvents(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


# numeric / engine
class ShapeMismatch(NumericError, ValueError):
    pass


class NonFiniteDetected(NumericError):
    pass


class NotOnTape(NumericError, ValueError):
    pass


class NonConvergence(NumericError):
    pass
