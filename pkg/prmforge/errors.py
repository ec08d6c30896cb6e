__all__ = [
    "AuthError",
    "BudgetExhaustedError",
    "EmitError",
    "GenerationError",
    "MisuseError",
    "ParseError",
    "PrmForgeError",
    "ProtocolError",
    "TransportError",
    "ValidationError",
]


class PrmForgeError(Exception):
    """Base class for every error raised by prmforge."""

    pass


class ValidationError(PrmForgeError, ValueError):
    """
    Raised when an input violates a documented precondition or invariant
    (empty candidate lists, out-of-range labels, non-finite logits, ...).
    """

    pass


class ParseError(ValidationError):
    """
    Raised when tagged model output cannot be turned into a Solution.

    The message is one of "no steps", "no answer" or "malformed tags".
    """

    pass


class GenerationError(PrmForgeError):
    """
    A single sample could not be generated (refusal or empty output).

    Instances are returned in the sample's slot rather than raised, so sibling
    samples of the same request are unaffected.
    """

    pass


class TransportError(PrmForgeError):
    """The backend or scorer could not be reached after all retries."""

    pass


class AuthError(PrmForgeError):
    """The backend rejected the credentials, or none were configured."""

    pass


class ProtocolError(PrmForgeError):
    """A backend or scorer answered with a payload that breaks the contract."""

    pass


class BudgetExhaustedError(PrmForgeError):
    """The per-problem rollout or search-step budget has been spent."""

    pass


class MisuseError(PrmForgeError, TypeError):
    """An API was called with an argument of the wrong role."""

    pass


class EmitError(PrmForgeError, OSError):
    """
    Writing annotation records to a sink failed part way.

    Attributes:
        written: Number of records fully written before the failure.
    """

    written: int

    def __init__(self, message: str, written: int) -> None:
        super().__init__(message)
        self.written = written
