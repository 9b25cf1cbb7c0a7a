"""Exception hierarchy shared by the library and the command-line driver."""


class IsaxError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(IsaxError, ValueError):
    """Invalid parameters, e.g. a segment count that does not divide the series length."""


class UsageError(IsaxError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class FormatError(IsaxError):
    """A dataset or index file is malformed or inconsistent with its declared shape."""
