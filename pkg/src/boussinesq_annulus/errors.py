"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class AnnulusError(Exception):
    """Base class for every error raised by this package."""


# input validation -------------------------------------------------------

class DomainError(AnnulusError, ValueError):
    pass


class SizeError(AnnulusError, ValueError):
    pass


class ArgError(AnnulusError, ValueError):
    pass


class RangeError(AnnulusError, ValueError):
    pass


class HarmonicityError(AnnulusError, ValueError):
    pass


class VariantError(AnnulusError, ValueError):
    pass


class SeedError(AnnulusError, ValueError):
    pass


class BracketError(AnnulusError, ValueError):
    pass


# numerical failures -----------------------------------------------------

class NumericalError(AnnulusError, ArithmeticError):
    """Base class for failures that are not caused by bad input."""


class SingularError(NumericalError):
    pass


class InfluenceSingular(SingularError):
    pass


class CompatibilityError(NumericalError):
    pass


class EigenFailure(NumericalError):
    pass


class DegenerateError(NumericalError):
    pass


class CFLViolation(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


# configuration ----------------------------------------------------------

class ParseError(AnnulusError, ValueError):
    """Malformed configuration text; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class ValidationError(AnnulusError, ValueError):
    """Well-formed configuration with an invalid value; names the key."""

    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")
