"""Wire contract between server, workers, learner, and console.

Message schemas (checked against the bundled JSON Schema document), the
recording-request lifecycle state machine, and event-stream types. All
messages are UTF-8 JSON carrying format_version 1; timestamps are integer
milliseconds since the Unix epoch. Decoding ignores unknown fields so newer
peers can add fields without breaking older ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import jsonschema

from .errors import Conflict, InvalidTransition, NotPermitted, SchemaError

PROTOCOL_FORMAT_VERSION = 1
DEFAULT_LEASE_MS = 600_000  # 10 minute claim lease
TOKEN_TTL_MS = 24 * 3600 * 1000

EVENT_KINDS = (
    "request_created",
    "request_claimed",
    "request_reopened",
    "request_completed",
    "recording_uploaded",
    "policy_published",
)

_SCHEMA = json.loads(
    resources.files("fleetnav.schemas").joinpath("fleet_protocol.schema.json").read_text())
_VALIDATORS = {
    name: jsonschema.Draft202012Validator(
        {"$defs": _SCHEMA["$defs"], "$ref": f"#/$defs/{name}"})
    for name in ("task", "claim", "recording_request", "fleet_event",
                 "teleop_frame")
}


def _check(name: str, doc: dict) -> None:
    error = jsonschema.exceptions.best_match(_VALIDATORS[name].iter_errors(doc))
    if error is not None:
        path = ".".join(str(p) for p in error.absolute_path)
        raise SchemaError(f"{name}: {error.message}", path=path)


def validate_teleop_frame(doc: dict) -> None:
    """Schema check for one console control frame."""
    if not isinstance(doc, dict):
        raise SchemaError("teleop frame must be a JSON object")
    _check("teleop_frame", doc)


@dataclass(frozen=True)
class TaskDescriptor:
    layout_seed: int
    episode_count: int = 1
    description: str = ""

    def to_dict(self) -> dict:
        return {"layout_seed": self.layout_seed, "episode_count": self.episode_count,
                "description": self.description}

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskDescriptor":
        return cls(layout_seed=int(doc["layout_seed"]),
                   episode_count=int(doc.get("episode_count", 1)),
                   description=doc.get("description", ""))


@dataclass(frozen=True)
class Claim:
    claim_id: str
    request_id: str
    worker_id: str
    issued_at: int
    expires_at: int

    def expired(self, now_ms: int) -> bool:
        return now_ms >= self.expires_at

    def to_dict(self) -> dict:
        return {"claim_id": self.claim_id, "request_id": self.request_id,
                "worker_id": self.worker_id, "issued_at": self.issued_at,
                "expires_at": self.expires_at}

    @classmethod
    def from_dict(cls, doc: dict) -> "Claim":
        return cls(claim_id=doc["claim_id"], request_id=doc["request_id"],
                   worker_id=doc["worker_id"], issued_at=int(doc["issued_at"]),
                   expires_at=int(doc["expires_at"]))


@dataclass(frozen=True)
class RecordingRequest:
    """One unit of fleet work: run episodes under a given policy.

    permitted_workers empty means any authenticated worker may claim.
    """

    request_id: str
    task: TaskDescriptor
    policy_id: int
    policy_hash: str
    policy_uri: str = ""
    permitted_workers: tuple = ()
    state: str = "open"  # open | claimed | completed
    claim: Claim = None

    def permits(self, worker_id: str) -> bool:
        return not self.permitted_workers or worker_id in self.permitted_workers

    def claim_active(self, now_ms: int) -> bool:
        return (self.state == "claimed" and self.claim is not None
                and not self.claim.expired(now_ms))

    def to_dict(self) -> dict:
        return {
            "format_version": PROTOCOL_FORMAT_VERSION,
            "request_id": self.request_id,
            "task": self.task.to_dict(),
            "policy_id": self.policy_id,
            "policy_hash": self.policy_hash,
            "policy_uri": self.policy_uri,
            "permitted_workers": list(self.permitted_workers),
            "state": self.state,
            "claim": self.claim.to_dict() if self.claim else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RecordingRequest":
        return cls(
            request_id=doc["request_id"],
            task=TaskDescriptor.from_dict(doc["task"]),
            policy_id=int(doc["policy_id"]),
            policy_hash=doc["policy_hash"],
            policy_uri=doc.get("policy_uri", ""),
            permitted_workers=tuple(doc.get("permitted_workers", ())),
            state=doc["state"],
            claim=Claim.from_dict(doc["claim"]) if doc.get("claim") else None,
        )


@dataclass(frozen=True)
class FleetEvent:
    cursor: int
    kind: str
    payload: dict = field(default_factory=dict)
    timestamp_ms: int = 0

    def to_dict(self) -> dict:
        return {"format_version": PROTOCOL_FORMAT_VERSION, "cursor": self.cursor,
                "kind": self.kind, "payload": self.payload,
                "timestamp_ms": self.timestamp_ms}

    @classmethod
    def from_dict(cls, doc: dict) -> "FleetEvent":
        return cls(cursor=int(doc["cursor"]), kind=doc["kind"],
                   payload=doc.get("payload", {}),
                   timestamp_ms=int(doc.get("timestamp_ms", 0)))


_TYPES = {
    "recording_request": RecordingRequest,
    "fleet_event": FleetEvent,
    "claim": Claim,
    "task": TaskDescriptor,
}
_NAMES = {v: k for k, v in _TYPES.items()}


def encode(message) -> bytes:
    """Schema-checked UTF-8 JSON bytes for any protocol message."""
    name = _NAMES.get(type(message))
    if name is None:
        raise SchemaError(f"not a protocol message: {type(message).__name__}")
    doc = message.to_dict()
    _check(name, doc)
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def decode(name: str, data) -> object:
    """Parse and validate one message; unknown fields are dropped."""
    if name not in _TYPES:
        raise SchemaError(f"unknown message type {name!r}")
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"{name}: not UTF-8: {exc}") from exc
    if isinstance(data, str):
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{name}: invalid JSON: {exc.msg}") from exc
    else:
        doc = data
    if not isinstance(doc, dict):
        raise SchemaError(f"{name}: expected a JSON object")
    _check(name, doc)
    try:
        return _TYPES[name].from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{name}: {exc}") from exc


def transition(request: RecordingRequest, action: str, *, now_ms: int,
               worker_id: str = None, claim_id: str = None,
               lease_ms: int = DEFAULT_LEASE_MS) -> RecordingRequest:
    """Pure lifecycle step: open -claim-> claimed -complete-> completed,
    with expire and cancel returning a claimed request to open.

    An expired claim does not block: claiming over it succeeds directly.
    """
    if action == "claim":
        if worker_id is None or claim_id is None:
            raise InvalidTransition("claim needs worker_id and claim_id")
        if request.state == "completed":
            raise InvalidTransition("cannot claim a completed request")
        if not request.permits(worker_id):
            raise NotPermitted(f"worker {worker_id!r} is not permitted")
        if request.claim_active(now_ms):
            raise Conflict(
                f"request {request.request_id} is claimed until "
                f"{request.claim.expires_at}")
        claim = Claim(claim_id=claim_id, request_id=request.request_id,
                      worker_id=worker_id, issued_at=now_ms,
                      expires_at=now_ms + lease_ms)
        return replace(request, state="claimed", claim=claim)

    if action == "renew":
        if request.state != "claimed" or request.claim is None:
            raise InvalidTransition("renew applies to claimed requests only")
        if request.claim.claim_id != claim_id:
            raise Conflict("renew by a non-holder")
        if request.claim.expired(now_ms):
            raise Conflict("claim already expired")
        claim = replace(request.claim, expires_at=now_ms + lease_ms)
        return replace(request, claim=claim)

    if action == "expire":
        if request.state != "claimed" or request.claim is None:
            raise InvalidTransition("expire applies to claimed requests only")
        if not request.claim.expired(now_ms):
            raise InvalidTransition("claim has not expired yet")
        return replace(request, state="open", claim=None)

    if action == "complete":
        if request.state != "claimed" or request.claim is None:
            raise InvalidTransition(
                f"cannot complete a request in state {request.state!r}")
        return replace(request, state="completed")

    if action == "cancel":
        if request.state != "claimed":
            raise InvalidTransition(
                f"cannot cancel a request in state {request.state!r}")
        return replace(request, state="open", claim=None)

    raise InvalidTransition(f"unknown action {action!r}")
