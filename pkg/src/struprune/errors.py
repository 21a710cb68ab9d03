"""Exception types shared across the package.

Validation failures (bad arguments, malformed files) raise ValueError
subclasses; numerical failures inside solvers raise RuntimeError subclasses.
The CLI maps the former to exit code 1 and the latter to exit code 2.
"""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ParameterError(ValueError):
    """A parameter is outside its documented domain."""


class FormatError(ValueError):
    """An on-disk artifact is malformed; the message names the offender."""


class SizeError(ValueError):
    """A problem instance exceeds the documented hard cap."""


class CapabilityError(ValueError):
    """The model lacks a component required by the requested operation."""


class SingularSystemError(RuntimeError):
    """A linear system is numerically singular at eps = 0."""


class SolverError(RuntimeError):
    """An iterative solve diverged or produced non-finite values."""
