"""Exception taxonomy shared across the package.

Two broad failure families matter downstream: usage/configuration problems
(bad shapes, missing artifacts, malformed files) and numeric problems
(non-finite values, solver breakdown). The CLI maps the former to exit
code 2 and the latter to exit code 3.
"""


class OgaeError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(OgaeError):
    """API misuse or missing/invalid inputs (maps to CLI exit code 2)."""


class ShapeError(UsageError):
    """Operands have incompatible or unexpected shapes."""


class DataFormatError(UsageError):
    """A data file does not follow its declared on-disk format."""


class NumericError(OgaeError):
    """A computation produced non-finite values or broke down numerically."""


class SolverError(NumericError):
    """QP solver failed to converge.

    Carries the last iterate and optimality gap so callers can decide
    whether to skip the batch or abort.
    """

    def __init__(self, message, last_alpha=None, gap=None, iterations=None):
        super().__init__(message)
        self.last_alpha = last_alpha
        self.gap = gap
        self.iterations = iterations
