"""Learned cluster ranking for two-level inverted-index nearest neighbor search."""
from .errors import ClusterRankError, ConfigError, FormatError, NumericError, ParameterError

__version__ = "0.1.0"
