"""Exception types shared across the package."""


class UotError(Exception):
    """Base class for all package errors."""


class NegativeMass(UotError, ValueError):
    """A mass value is negative."""


class NonpositiveMass(UotError, ValueError):
    """A mass value is zero or negative where strict positivity is required."""


class NonpositiveDensity(UotError, ValueError):
    """A grid density is zero or negative where strict positivity is required."""


class PointOutsideDomain(UotError, ValueError):
    """A point lies outside the declared domain box."""


class LengthMismatch(UotError, ValueError):
    """Paired inputs have inconsistent lengths or shapes."""


class ParseError(UotError, ValueError):
    """A measure/problem file does not parse against its schema.

    Carries human-readable location info (line number or field path).
    """

    def __init__(self, message, *, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.field = field


class DomainMismatch(UotError, ValueError):
    """Two measures do not live on the same domain box."""


class TooLarge(UotError, ValueError):
    """Instance exceeds the size limit of a brute-force routine."""


class NoConvergence(UotError, RuntimeError):
    """An inner scalar solve (Newton/bisection) failed; signals a bug."""


class NotConverged(UotError, RuntimeError):
    """An iterative solver stopped without reaching its tolerance."""

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


class SingularSystem(UotError, RuntimeError):
    """A linear system that should be invertible is singular; signals a bug."""
