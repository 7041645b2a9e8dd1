"""Exception hierarchy shared by all toolkit modules.

Everything raised on purpose derives from :class:`LesionbenchError`, so
callers (and the CLI) can distinguish bad input from genuine bugs.
"""


class LesionbenchError(Exception):
    """Base class for all errors raised by this toolkit."""


class FormatError(LesionbenchError, ValueError):
    """Malformed file content: wrong header, bad magic, truncated stream."""


class UniquenessError(LesionbenchError, ValueError):
    """A key that must be unique appeared more than once."""


class DomainError(LesionbenchError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(DomainError):
    """A vector or matrix has the wrong length or dimensions."""


class RangeError(DomainError):
    """A numeric value lies outside its permitted interval."""


class CoverageError(DomainError):
    """Two collections that must describe the same image set do not."""


class CapacityError(DomainError):
    """A fixed-size vocabulary or buffer would overflow."""
