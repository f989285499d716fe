"""Exception hierarchy shared by all modules."""


class ReluExtractError(Exception):
    """Base class for every error raised by this package."""


class InputError(ReluExtractError, ValueError):
    """Malformed arguments: wrong dimension, zero vectors, violated preconditions."""


class BudgetError(ReluExtractError):
    """The oracle's query budget is exhausted."""


class NumericalError(ReluExtractError, ArithmeticError):
    """A numerical routine failed (singular system, bisection did not converge)."""


class ResourceError(ReluExtractError):
    """A parameter schedule demands more work than the configured cap."""


class InconsistencyError(ReluExtractError):
    """A structural invariant failed after construction (hypothesis of a lemma violated)."""


class TransportError(ReluExtractError, OSError):
    """Socket-level failure in the wire oracle."""


class ProtocolError(ReluExtractError):
    """A wire message could not be decoded, or the peer reported an error."""


class StageError(ReluExtractError):
    """Wraps an upstream failure with the pipeline stage it happened in."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        # artifacts produced by the stages that did finish
        self.partial = dict(partial or {})
