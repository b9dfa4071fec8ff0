"""Exception hierarchy; each class maps to a CLI exit code."""


class VitalgateError(Exception):
    exit_code = 1


class UsageError(VitalgateError):
    exit_code = 1


class DataError(VitalgateError, ValueError):
    """Malformed or degenerate input data."""

    exit_code = 2


class NumericError(VitalgateError, ArithmeticError):
    """Numerical failure: singular kernels, diverged training, undefined metrics."""

    exit_code = 3
