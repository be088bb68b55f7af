"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to, so the command-line front end
can translate failures without inspecting messages.
"""


class UlfDtiError(Exception):
    exit_code = 1


class UsageError(UlfDtiError, ValueError):
    """Invalid argument or precondition violated by the caller."""

    exit_code = 2


class FormatError(UlfDtiError):
    """Malformed file contents (bad magic, wrong row counts, ...)."""

    exit_code = 3


class ParseError(FormatError):
    pass


class UnsupportedError(FormatError):
    pass


class CorruptionError(FormatError):
    """File is shorter than its header claims."""


class NumericalError(UlfDtiError, ArithmeticError):
    exit_code = 4


class DegenerateGeometryError(NumericalError):
    """Design matrix is rank deficient for the requested fit."""


class UnderdeterminedError(NumericalError):
    pass


class UndefinedValueError(NumericalError):
    """Statistic undefined for the given data (e.g. zero variance)."""


class DegenerateFieldError(NumericalError):
    """Random displacement field rejected too many times."""


class StateError(UlfDtiError, RuntimeError):
    exit_code = 4
