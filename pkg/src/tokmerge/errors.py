"""Exception hierarchy shared across the package.

Two families matter to callers: configuration problems (bad parameters,
unparseable files) and numeric problems (non-finite values, degenerate
distributions). The CLI maps them to distinct exit codes.
"""


class TokmergeError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TokmergeError, ValueError):
    """Invalid parameter combination or malformed configuration."""


class ParseError(ConfigError):
    """A point-cloud file failed to parse.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)


class NumericError(TokmergeError, ArithmeticError):
    """A computation produced or encountered invalid numerics."""


class NonFiniteError(NumericError):
    """NaN or infinity showed up where finite values are required."""


class DegenerateDistributionError(NumericError):
    """A statistic is undefined for the given data (e.g. zero variance)."""
