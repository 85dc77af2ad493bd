"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes (validation 2, data 3, numeric 4).
"""


class RffSpoofError(Exception):
    exit_code = 1


class ValidationError(RffSpoofError, ValueError):
    """Invalid configuration, argument or field value."""

    exit_code = 2


class DataError(RffSpoofError):
    """Input data missing, truncated, corrupt or inconsistent."""

    exit_code = 3


class CrcError(DataError):
    pass


class LossOfLock(DataError):
    """Tracking loop lost the signal (or a discriminator was degenerate)."""

    exit_code = 3


class NumericError(RffSpoofError, ArithmeticError):
    """NaN/Inf produced during computation."""

    exit_code = 4
