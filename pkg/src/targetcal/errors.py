"""Exception hierarchy shared by the library and the CLI."""


class TargetCalError(Exception):
    """Base class for all library errors."""


class InputError(TargetCalError, ValueError):
    """Invalid or malformed input data (CLI exit status 1)."""


class NumericalError(TargetCalError, ArithmeticError):
    """Numerical failure during estimation (CLI exit status 2)."""


class DegenerateGeometryError(NumericalError):
    """Geometry too close to a singular configuration to solve reliably."""


class ConicClassError(InputError):
    """A conic is not of the class an operation requires."""

    def __init__(self, conic_class: str, message: str | None = None):
        self.conic_class = conic_class
        super().__init__(message or f"expected a real ellipse, got {conic_class}")


class BehindCameraError(NumericalError):
    """A point has zero or negative depth in a camera."""


class InsufficientDataError(InputError):
    """Not enough observations for the requested estimate."""


class ReconstructionError(NumericalError):
    """Conic plane reconstruction failed for a view pair."""


class AdjustmentError(NumericalError):
    """Bundle adjustment diverged or the normal equations are rank deficient."""

    def __init__(self, message: str, deficient: list[str] | None = None):
        self.deficient = deficient or []
        super().__init__(message)
