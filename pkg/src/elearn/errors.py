"""Exception hierarchy shared by the library and the CLI."""


class ELearnError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ELearnError, ValueError):
    """An argument violates a documented precondition."""


class DataError(ELearnError, ValueError):
    """Input data could not be parsed or failed validation."""


class NumericalError(ELearnError, ArithmeticError):
    """A numerical routine failed (singular system, divergence)."""


class SingularSystemError(NumericalError):
    """A linear system or information matrix is (numerically) singular."""


class DivergenceError(NumericalError):
    """An iterative solver produced a non-finite objective."""
