"""Exception types shared across the package.

The CLI maps these onto stable exit codes (config -> 2, numerics -> 3,
I/O -> 4), so raise the most specific one that applies.
"""


class ViewplanError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ViewplanError):
    """Invalid configuration, arguments, or input data shape."""


class DomainError(ViewplanError):
    """A value fell outside an operation's documented domain."""


class NumericsError(ViewplanError):
    """Optimization or rendering produced non-finite values."""


class IOFailure(ViewplanError):
    """A file could not be read or written."""
