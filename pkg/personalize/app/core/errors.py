"""Error hierarchy shared by every module.

Each class carries a stable ``exit_code`` that the CLI maps to a process exit
status:

  1  unexpected failure
  2  usage / configuration   (UsageError, SpecError)
  3  data / format           (DataError and subclasses)
  4  numerical               (NumericalError, NonFiniteError)
"""


class PersonalizeError(Exception):
    exit_code = 1


# ─── Usage / configuration (exit 2) ───

class UsageError(PersonalizeError, ValueError):
    exit_code = 2


class SpecError(PersonalizeError, ValueError):
    """Out-of-range construction parameters (counts, step numbers, enum values)."""

    exit_code = 2


# ─── Data (exit 3) ───

class DataError(PersonalizeError, ValueError):
    exit_code = 3


class ParseError(DataError):
    pass


class MissingFileError(DataError):
    def __init__(self, path) -> None:
        super().__init__(f"Referenced file does not exist: {path}")
        self.path = path


class FormatError(DataError):
    pass


class VersionError(DataError):
    pass


class PlaceholderError(DataError):
    pass


class ShapeError(DataError):
    pass


class DimensionError(DataError):
    pass


class ConditioningError(DataError):
    pass


class UnknownTokenError(DataError):
    pass


class InitError(DataError):
    pass


class EmptyPositiveError(DataError):
    pass


class MissingOutputError(DataError):
    pass


class StepIndexError(DataError, IndexError):
    """A timestep, layer index or schedule step outside its valid range."""


# ─── Numerical (exit 4) ───

class NumericalError(PersonalizeError, ArithmeticError):
    exit_code = 4


class NonFiniteError(NumericalError):
    def __init__(self, component: str, value: float) -> None:
        super().__init__(f"Non-finite value in {component}: {value}")
        self.component = component
        self.value = value
