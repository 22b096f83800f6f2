"""Exception hierarchy shared by every module."""


class ClusterRankError(Exception):
    """Base class; carries the CLI exit code for the failure category."""

    exit_code = 1


class ParameterError(ClusterRankError, ValueError):
    exit_code = 1


class ConfigError(ClusterRankError):
    exit_code = 1


class FormatError(ClusterRankError):
    exit_code = 2


class NumericError(ClusterRankError, ArithmeticError):
    exit_code = 3
