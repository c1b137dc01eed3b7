"""Exception types shared across the package."""


class FleetNavError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FleetNavError):
    pass


class GenerationFailed(FleetNavError):
    """Rejection sampling exhausted its attempt budget; the generation
    config is over-constrained."""


class ParseError(FleetNavError):
    """Malformed serialized input. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class InvalidLayout(FleetNavError):
    pass


class EpisodeEnded(FleetNavError):
    """step() called after a terminal event."""


class ShapeMismatch(FleetNavError):
    pass


class SpecMismatch(FleetNavError):
    """Observation does not match the policy's observation spec."""


class HashMismatch(FleetNavError):
    """Serialized content does not match its advertised digest."""


class SchemaError(FleetNavError):
    """Message violates the wire schema. Carries the offending field path."""

    def __init__(self, message, path=""):
        super().__init__(f"{message} (at {path or '$'})")
        self.path = path


class ProtocolError(FleetNavError):
    pass


class Conflict(ProtocolError):
    """Claim attempted on a request already claimed under an unexpired lease."""


class InvalidTransition(ProtocolError):
    pass


class NotPermitted(ProtocolError):
    pass


class NotFound(ProtocolError):
    pass


class AuthFailed(FleetNavError):
    pass


class AuthExpired(AuthFailed):
    pass


class ClaimInvalid(FleetNavError):
    pass


class ValidationFailed(FleetNavError):
    """Upload rejected; lists every violated check."""

    def __init__(self, violations):
        super().__init__("; ".join(violations) or "validation failed")
        self.violations = list(violations)


class StorageFailed(FleetNavError):
    pass


class EmptyInput(FleetNavError):
    """An aggregate operation was handed nothing to aggregate."""


class EmptyBuffer(FleetNavError):
    pass


class MalformedLog(FleetNavError):
    pass


class NumericalDivergence(FleetNavError):
    """A training loss became non-finite; learning is halted."""


class PublishFailed(FleetNavError):
    pass


class MismatchAt(FleetNavError):
    """Replay diverged from the recorded episode at a specific step."""

    def __init__(self, step, detail=""):
        super().__init__(f"replay mismatch at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class FatalAuth(FleetNavError):
    """Credentials rejected; the worker must stop rather than retry."""
