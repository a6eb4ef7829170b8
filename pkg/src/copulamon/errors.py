"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 1,
data problems with 2 and numerical failures with 3.
"""


class CopulamonError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(CopulamonError, ValueError):
    """Invalid user configuration (bad rated power, window spec, ...)."""


class DataFormatError(CopulamonError, ValueError):
    """Input data cannot be interpreted (missing column, wrong shape)."""


class DomainError(CopulamonError, ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(CopulamonError, ArithmeticError):
    """A numerical routine failed (singular matrix, non-finite value)."""


class SolverError(NumericError):
    """Newton iteration hit a non-finite residual."""


class EpochError(NumericError):
    """Too many coordinate blocks failed inside one ascent epoch."""


class EstimationError(NumericError):
    """Monte Carlo estimate rejected too many samples."""


class CalibrationError(NumericError):
    """Requested false-alarm target cannot be met by the simulated values."""


class FitError(NumericError):
    """A baseline curve fit did not converge."""


class CoverageError(DataFormatError):
    """Training data leaves some knot intervals without records."""

    def __init__(self, message, empty_intervals=()):
        super().__init__(message)
        self.empty_intervals = list(empty_intervals)
