"""Exception hierarchy shared across the package.

Each category maps to a CLI exit code so batch callers can react to
failures without parsing free text.
"""


class MslidarError(Exception):
    """Base class for all package errors."""

    category = "internal"
    exit_code = 1


class ConfigError(MslidarError):
    """Invalid configuration: unknown keys, bad values, unusable combinations."""

    category = "config"
    exit_code = 2


class DataError(MslidarError):
    """Invalid or inconsistent input data: malformed files, missing columns,
    mismatched lengths, empty selections."""

    category = "data"
    exit_code = 3


class NumericError(MslidarError):
    """Numeric failure at runtime: NaN loss, degenerate geometry."""

    category = "numeric"
    exit_code = 4
