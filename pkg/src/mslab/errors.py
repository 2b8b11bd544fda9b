"""Exception hierarchy shared across the toolkit.

ValidationError covers bad inputs (malformed matrices, configs, files) and
maps to CLI exit code 1.  NumericalError covers failures of the numerics
themselves (density floor underflow, quadrature mass shortfall) and maps to
exit code 2.
"""


class MslabError(Exception):
    """Base class for all package errors."""


class ValidationError(MslabError, ValueError):
    """Invalid user input: matrices, configurations, files, flags."""


class NumericalError(MslabError, RuntimeError):
    """A numerical routine failed in a way that invalidates its result."""
