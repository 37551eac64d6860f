"""
Exception hierarchy for dbsmeta.

Every error raised on purpose by the library derives from ``DbsMetaError`` so
that the command line front end can map it to an exit status.
"""


class DbsMetaError(Exception):
    """Base class of all dbsmeta errors."""

    exit_code = 1


class ConfigError(DbsMetaError):
    """Invalid configuration, distribution parameters or missing input file."""

    exit_code = 2


class DomainError(DbsMetaError, ValueError):
    """Argument outside the domain of a model function."""


class ContractError(DbsMetaError):
    """Caller violated an operation precondition (infeasible trajectory, misaligned data)."""


class NumericError(DbsMetaError, ArithmeticError):
    """Non-finite parameters or updates.

    Parameters
    ----------
    message : str
        Human readable description
    iteration : int, optional
        Training iteration at which the problem was detected
    """

    exit_code = 3

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = "{} (iteration {})".format(message, iteration)
        super().__init__(message)
        self.iteration = iteration


class OracleCapExceeded(DbsMetaError):
    """The brute-force search space is larger than the configured cap.

    Parameters
    ----------
    required : int
        Number of joint trajectories the enumeration would need
    cap : int
        Configured enumeration cap
    """

    exit_code = 4

    def __init__(self, required, cap):
        super().__init__(
            "enumeration needs {} joint trajectories but the cap is {}; "
            "raise oracle.cap to at least {}".format(required, cap, required))
        self.required = required
        self.cap = cap
