"""Exception hierarchy.

Every error carries the CLI exit code of its family: 2 for invalid
configuration, 3 for bad data, 4 for numerical failure.
"""


class PcamilError(Exception):
    exit_code = 1


class ConfigError(PcamilError, ValueError):
    exit_code = 2


class DataError(PcamilError):
    exit_code = 3


class NumericalError(PcamilError, ArithmeticError):
    exit_code = 4


# configuration
class InvalidConfig(ConfigError):
    pass


class InvalidK(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


# manifest / bag files
class MissingFile(DataError, FileNotFoundError):
    pass


class MalformedRow(DataError):
    def __init__(self, line_no: int, message: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


class UnknownLabel(DataError):
    pass


class UnknownSide(DataError):
    pass


class DuplicatePatientId(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class NonFiniteEntry(DataError):
    pass


class DegenerateBag(DataError):
    pass


# training / evaluation preconditions
class SingleClassTrainingSet(DataError):
    pass


class SingleClassCohort(DataError):
    pass


class NoPositives(DataError):
    pass


class EmptyBag(DataError):
    pass


class TooFewPerClass(DataError):
    pass


class TooFewFolds(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroEvidence(DataError):
    pass


class OutOfRangePosterior(DataError):
    pass


# numerics
class DomainError(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    pass
