"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class GrutvError(Exception):
    exit_code = 1


class UsageError(GrutvError):
    exit_code = 1


class DimensionError(GrutvError, ValueError):
    exit_code = 1


class ConfigurationError(GrutvError):
    exit_code = 1


class DataError(GrutvError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OrderingError(DataError, ValueError):
    pass


class UndefinedMetricError(DataError, ValueError):
    pass


class NumericError(GrutvError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SamplingError(NumericError):
    pass
