"""Exception types shared across the package."""


class TrajawareError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(TrajawareError, ValueError):
    """An operation was called with out-of-range or malformed parameters."""


class ValidationError(TrajawareError, ValueError):
    """Loaded data or configuration failed a consistency check."""


class TraceParseError(TrajawareError, ValueError):
    """A trace or route file is malformed; carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class GraphLookupError(TrajawareError, KeyError):
    """A vehicle id was not found in the graph or frame it was expected in."""


class ConsistencyError(TrajawareError, ValueError):
    """A vehicle state disagrees with the road network it claims to be on."""


class ShapeError(TrajawareError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class NumericError(TrajawareError, ArithmeticError):
    """An operation produced NaN or Inf."""


class NoActionError(TrajawareError, RuntimeError):
    """The action set is empty; the caller must drop or wait."""


class EvaluationError(TrajawareError, RuntimeError):
    """An evaluation produced no valid episodes."""


class TrainingDivergence(TrajawareError, RuntimeError):
    """Training loss exceeded the divergence threshold."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
