"""Exception hierarchy shared across the package.

The CLI maps :class:`ValidationError` to exit code 1 and :class:`ArtifactIOError`
to exit code 2.
"""


class ValidationError(ValueError):
    """Invalid argument, configuration or data invariant violation."""


class ShapeError(ValidationError):
    """Operand shapes are incompatible."""


class UnknownSymbolError(ValidationError):
    """A character is missing from the alphabet / embedding table."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward without a forward pass)."""


class DegenerateGradientError(ArithmeticError):
    """Gradient norm collapsed to ~0 so a gradient-normalised step is undefined."""


class MetricUndefinedError(ArithmeticError):
    """A metric was requested over an empty eligible set."""


class ArtifactIOError(OSError):
    """Missing or unreadable dataset/checkpoint artifact."""


class ManifestParseError(ValidationError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"manifest line {lineno}: {message}")
        self.lineno = lineno
