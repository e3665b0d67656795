"""Exception hierarchy.

The CLI maps each family onto an exit code: configuration problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class GraphAUError(Exception):
    exit_code = 2


class ConfigError(GraphAUError, ValueError):
    exit_code = 1


class InvalidConfig(ConfigError):
    pass


class DataError(GraphAUError, ValueError):
    exit_code = 2


class MissingAU(DataError, KeyError):
    def __init__(self, code):
        self.code = code
        super().__init__(f"AU{code} is missing from the intensity map")

    def __str__(self):
        return self.args[0]


class InvalidIntensity(DataError):
    pass


class InvalidPSPI(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateFrameId(DataError):
    pass


class MissingPrediction(DataError):
    pass


class OverlappingSets(DataError):
    pass


class EmptyCategory(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class EmptyDataset(DataError):
    pass


class IncompatibleCheckpoint(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class KTooLarge(ConfigError):
    pass


class NonOneHotLabel(DataError):
    pass


class NumericFailure(GraphAUError, ArithmeticError):
    exit_code = 3
