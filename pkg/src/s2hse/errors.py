"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: anything derived from ``S2HSEError``
except ``DivergenceError`` is a usage/input problem (exit 2);
``DivergenceError`` signals a numeric failure (exit 3).
"""


class S2HSEError(Exception):
    pass


class ContractError(S2HSEError):
    """An API precondition was violated (shape/channel/grid mismatch)."""


class InvalidInputError(S2HSEError):
    """Input data is structurally unusable (odd dims, too small, empty side)."""


class InvalidConfigError(S2HSEError):
    """A configuration value is out of its documented range."""


class DecodeError(S2HSEError):
    """A file could not be parsed (bad magic, truncation, size mismatch)."""


class EmptyResultError(S2HSEError):
    """The requested quantity is undefined on this input (empty denominator)."""


class OutOfExtentError(S2HSEError):
    """Check points fall outside the raster; offenders listed in ``points``."""

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = list(points)


class DivergenceError(S2HSEError):
    """Training or optimization produced non-finite values."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
