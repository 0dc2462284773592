"""Exception types shared across the package."""


class MeshError(ValueError):
    """Invalid or degenerate mesh input."""


class InsufficientNeighborsError(ValueError):
    """Too few points around a center to estimate a local frame."""


class RankDeficientError(ValueError):
    """A least-squares system or point configuration has insufficient rank."""


class ConvergenceError(RuntimeError):
    """An iterative or spectral solve did not reach the requested accuracy."""


class NumericalError(FloatingPointError):
    """Non-finite values appeared in a loss, gradient or parameter."""


class TapeError(RuntimeError):
    """A recorded forward tape was reused or does not match the call."""


class ParseError(ValueError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateTargetError(RuntimeError):
    """Too many target patches have unusable local reference frames."""
