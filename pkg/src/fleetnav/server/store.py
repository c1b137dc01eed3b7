"""Durable single-node fleet store: journal, objects, accounts, tokens.

On-disk layout under ``data_dir``::

    journal.jsonl                append-only event log (the public feed)
    secret.key                   HMAC key for session tokens
    accounts.json                credential records, never journaled
    objects/recordings/{id}.jsonl
    objects/policies/{id}.bin

The journal is both the write-ahead log and the event stream clients poll:
one JSON line per FleetEvent, dense cursors starting at 1, flushed and
fsynced before a mutation is acknowledged. In-memory state (request map,
recording metadata, policy registry, stats) is a pure fold over the events,
so restart recovery is "replay the journal". A torn tail line from a crash
is truncated away on open.

Recording and policy bytes live outside the journal and are made durable
with the usual tmp file -> fsync -> atomic rename dance, always *before*
the events that reference them are journaled. A crash between the two
leaves an unreferenced object file, never a completed request without its
recording.

All request mutations take one lock and go through the protocol state
machine, which is what makes claim arbitration linearizable.

``fault`` is a crash-injection seam: when set, it is called with a point
name at each durability boundary and may raise to simulate a crash. After
a fault fires mid-operation the instance must be discarded and reopened,
exactly like a killed process.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import threading
import time
import uuid
from dataclasses import replace as _replace

from ..errors import (
    AuthExpired,
    AuthFailed,
    ClaimInvalid,
    Conflict,
    MalformedLog,
    NotFound,
    ParseError,
    PublishFailed,
    StorageFailed,
    ValidationFailed,
)
from ..logs import parse_episode_log, validate_episode_log
from ..protocol import (
    DEFAULT_LEASE_MS,
    TOKEN_TTL_MS,
    Claim,
    FleetEvent,
    RecordingRequest,
    TaskDescriptor,
    transition,
)

MAX_UPLOAD_BYTES = 64 * 1024 * 1024
PBKDF2_ITERATIONS = 100_000
FAULT_POINTS = (
    "before_object_rename",
    "after_object_rename",
    "before_journal_append",
    "after_journal_append",
)


class SimulatedCrash(Exception):
    """Raised by test fault hooks; not part of the public error hierarchy."""


def _fsync_dir(path: str) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _write_durable(path: str, data: bytes, fault=None) -> None:
    """Atomic-rename write: the file is either absent or complete."""
    tmp = path + ".tmp-" + uuid.uuid4().hex[:8]
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    if fault:
        fault("before_object_rename")
    os.replace(tmp, path)
    if fault:
        fault("after_object_rename")
    _fsync_dir(os.path.dirname(path))


class FleetStore:
    def __init__(self, data_dir: str, *, lease_ms: int = DEFAULT_LEASE_MS,
                 token_ttl_ms: int = TOKEN_TTL_MS, clock=None, fault=None):
        self.data_dir = data_dir
        self.lease_ms = int(lease_ms)
        self.token_ttl_ms = int(token_ttl_ms)
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.fault = fault
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._closed = False

        self._recordings_dir = os.path.join(data_dir, "objects", "recordings")
        self._policies_dir = os.path.join(data_dir, "objects", "policies")
        os.makedirs(self._recordings_dir, exist_ok=True)
        os.makedirs(self._policies_dir, exist_ok=True)

        self._accounts_path = os.path.join(data_dir, "accounts.json")
        self._accounts = self._load_accounts()
        self._secret = self._load_or_create_secret()

        # State below is a fold over the journal; never mutated elsewhere.
        self._events: list[FleetEvent] = []
        self._requests: dict[str, RecordingRequest] = {}
        self._active_claims: dict[str, str] = {}  # claim_id -> request_id
        self._claim_uploads: dict[str, str] = {}  # claim_id -> recording_id
        self._recordings: dict[str, dict] = {}
        self._policies: dict[int, dict] = {}

        self._journal_path = os.path.join(data_dir, "journal.jsonl")
        self._recover_journal()
        self._journal = open(self._journal_path, "ab")

    # ------------------------------------------------------------- journal

    def _recover_journal(self) -> None:
        if not os.path.exists(self._journal_path):
            return
        with open(self._journal_path, "rb") as f:
            raw = f.read()
        good_end = 0
        offset = 0
        while offset < len(raw):
            nl = raw.find(b"\n", offset)
            if nl < 0:
                break  # torn final line, no newline
            line = raw[offset:nl]
            try:
                ev = FleetEvent.from_dict(json.loads(line.decode("utf-8")))
            except (ValueError, KeyError, TypeError, UnicodeDecodeError):
                break  # torn write that happened to include a newline
            if ev.cursor != len(self._events) + 1:
                raise StorageFailed(
                    f"journal cursor gap: got {ev.cursor}, "
                    f"expected {len(self._events) + 1}")
            self._apply(ev)
            self._events.append(ev)
            good_end = nl + 1
            offset = nl + 1
        if good_end != len(raw):
            with open(self._journal_path, "r+b") as f:
                f.truncate(good_end)
                f.flush()
                os.fsync(f.fileno())
            _fsync_dir(self.data_dir)

    def _fault_hook(self, point: str) -> None:
        if self.fault is not None:
            self.fault(point)

    def _emit(self, entries: list) -> list:
        """Journal a batch of (kind, payload) atomically, then apply.

        One buffer, one write, one fsync: either the whole batch is
        acknowledged or a torn tail is truncated on recovery. Memory is only
        updated after the fsync, so a crash here never acknowledges state
        the journal does not hold.
        """
        now = self.clock()
        events = []
        lines = []
        for i, (kind, payload) in enumerate(entries):
            ev = FleetEvent(cursor=len(self._events) + 1 + i, kind=kind,
                            payload=payload, timestamp_ms=now)
            events.append(ev)
            lines.append(json.dumps(ev.to_dict(), sort_keys=True))
        buf = ("\n".join(lines) + "\n").encode("utf-8")
        self._fault_hook("before_journal_append")
        try:
            self._journal.write(buf)
            self._journal.flush()
            os.fsync(self._journal.fileno())
        except OSError as exc:
            raise StorageFailed(f"journal append failed: {exc}") from exc
        self._fault_hook("after_journal_append")
        for ev in events:
            self._apply(ev)
            self._events.append(ev)
        self._cond.notify_all()
        return events

    def _apply(self, ev: FleetEvent) -> None:
        p = ev.payload
        if ev.kind == "request_created":
            req = RecordingRequest.from_dict(p["request"])
            self._requests[req.request_id] = req
        elif ev.kind == "request_claimed":
            req = self._requests[p["request_id"]]
            claim = Claim.from_dict(p["claim"])
            if req.claim is not None:
                self._active_claims.pop(req.claim.claim_id, None)
            self._requests[req.request_id] = _replace(
                req, state="claimed", claim=claim)
            self._active_claims[claim.claim_id] = req.request_id
        elif ev.kind == "request_reopened":
            req = self._requests[p["request_id"]]
            if req.claim is not None:
                self._active_claims.pop(req.claim.claim_id, None)
            self._requests[req.request_id] = _replace(
                req, state="open", claim=None)
        elif ev.kind == "request_completed":
            req = self._requests.pop(p["request_id"], None)
            if req is not None and req.claim is not None:
                self._active_claims.pop(req.claim.claim_id, None)
        elif ev.kind == "recording_uploaded":
            self._recordings[p["recording_id"]] = dict(p)
            self._claim_uploads[p["claim_id"]] = p["recording_id"]
        elif ev.kind == "policy_published":
            self._policies[int(p["policy_id"])] = dict(p)

    # ------------------------------------------------------------ accounts

    def _load_accounts(self) -> dict:
        if not os.path.exists(self._accounts_path):
            return {}
        with open(self._accounts_path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        return doc.get("accounts", {})

    def _save_accounts(self) -> None:
        doc = {"format_version": 1, "accounts": self._accounts}
        _write_durable(self._accounts_path,
                       json.dumps(doc, sort_keys=True, indent=1).encode("utf-8"))

    def _load_or_create_secret(self) -> bytes:
        path = os.path.join(self.data_dir, "secret.key")
        if os.path.exists(path):
            with open(path, "rb") as f:
                return bytes.fromhex(f.read().decode("ascii").strip())
        key = secrets.token_bytes(32)
        _write_durable(path, key.hex().encode("ascii"))
        return key

    def create_account(self, username: str, password: str,
                       worker_id: str = None, replace: bool = False) -> str:
        """Register a worker login; returns the worker_id. Local/admin only."""
        with self._lock:
            if username in self._accounts and not replace:
                raise Conflict(f"account {username!r} already exists")
            worker_id = worker_id or username
            salt = secrets.token_bytes(16)
            digest = hashlib.pbkdf2_hmac(
                "sha256", password.encode("utf-8"), salt, PBKDF2_ITERATIONS)
            self._accounts[username] = {
                "worker_id": worker_id,
                "salt": salt.hex(),
                "hash": digest.hex(),
                "iterations": PBKDF2_ITERATIONS,
            }
            self._save_accounts()
            return worker_id

    def login(self, username: str, password: str) -> dict:
        """Verify credentials, mint a signed bearer token."""
        with self._lock:
            record = self._accounts.get(username)
        # Hash against a dummy salt on unknown users so the timing does not
        # reveal which usernames exist.
        salt = bytes.fromhex(record["salt"]) if record else b"\x00" * 16
        iters = record["iterations"] if record else PBKDF2_ITERATIONS
        digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"),
                                     salt, iters)
        if record is None or not hmac.compare_digest(digest.hex(), record["hash"]):
            raise AuthFailed("unknown user or wrong password")
        worker_id = record["worker_id"]
        expires_at = self.clock() + self.token_ttl_ms
        nonce = secrets.token_hex(8)
        msg = f"{worker_id}.{expires_at}.{nonce}"
        sig = hmac.new(self._secret, msg.encode("utf-8"), hashlib.sha256)
        token = f"{msg}.{sig.hexdigest()}"
        return {"token": token, "worker_id": worker_id, "expires_at": expires_at}

    def authenticate(self, token: str) -> str:
        """Return the worker_id a token is bound to, or raise."""
        if not isinstance(token, str) or token.count(".") < 3:
            raise AuthFailed("malformed token")
        worker_id, expires_s, nonce, sig = token.rsplit(".", 3)
        msg = f"{worker_id}.{expires_s}.{nonce}"
        want = hmac.new(self._secret, msg.encode("utf-8"), hashlib.sha256)
        if not hmac.compare_digest(sig, want.hexdigest()):
            raise AuthFailed("bad token signature")
        try:
            expires_at = int(expires_s)
        except ValueError as exc:
            raise AuthFailed("bad token expiry") from exc
        if self.clock() >= expires_at:
            raise AuthExpired("token expired")
        return worker_id

    # ------------------------------------------------------------ requests

    def _sweep_expired(self) -> None:
        # Lazy lease expiry: reopen abandoned claims whenever state is read
        # or contended. Must hold the lock.
        now = self.clock()
        for req in list(self._requests.values()):
            if (req.state == "claimed" and req.claim is not None
                    and req.claim.expired(now)):
                self._emit([("request_reopened",
                             {"request_id": req.request_id, "cause": "expired"})])

    def create_request(self, task: TaskDescriptor, policy_id: int,
                       policy_hash: str = None, policy_uri: str = None,
                       permitted_workers=()) -> dict:
        """Enqueue recording work. Hash/uri default from the policy registry."""
        with self._lock:
            if policy_hash is None:
                meta = self._policies.get(int(policy_id))
                if meta is None:
                    raise NotFound(f"policy {policy_id} is not published")
                policy_hash = meta["content_hash"]
                policy_uri = meta["uri"]
            req = RecordingRequest(
                request_id="req-" + uuid.uuid4().hex[:16],
                task=task,
                policy_id=int(policy_id),
                policy_hash=policy_hash,
                policy_uri=policy_uri or f"/v1/policies/{policy_id}",
                permitted_workers=tuple(permitted_workers),
            )
            self._emit([("request_created", {"request": req.to_dict()})])
            return req.to_dict()

    def list_requests(self, worker_id: str = None) -> list:
        """Open and claimed requests, creation order. Completed ones are gone."""
        with self._lock:
            self._sweep_expired()
            out = []
            for req in self._requests.values():
                if worker_id is not None and not req.permits(worker_id):
                    continue
                out.append(req.to_dict())
            return out

    def get_request(self, request_id: str) -> dict:
        with self._lock:
            self._sweep_expired()
            req = self._requests.get(request_id)
            if req is None:
                raise NotFound(f"no such request {request_id!r}")
            return req.to_dict()

    def claim_request(self, worker_id: str, request_id: str) -> dict:
        with self._lock:
            req = self._requests.get(request_id)
            if req is None:
                raise NotFound(f"no such request {request_id!r}")
            now = self.clock()
            # transition() raises Conflict while a live lease holds; an
            # expired lease is claimed over directly.
            updated = transition(req, "claim", now_ms=now, worker_id=worker_id,
                                 claim_id="clm-" + uuid.uuid4().hex[:16],
                                 lease_ms=self.lease_ms)
            self._emit([("request_claimed",
                         {"request_id": request_id,
                          "claim": updated.claim.to_dict(),
                          "renewal": False})])
            return updated.claim.to_dict()

    def claimed_request(self, worker_id: str, claim_id: str) -> dict:
        """Resolve a live claim to its request; the holder only."""
        with self._lock:
            self._sweep_expired()
            request_id = self._active_claims.get(claim_id)
            if request_id is None:
                raise ClaimInvalid(f"no live claim {claim_id!r}")
            req = self._requests[request_id]
            if req.claim.worker_id != worker_id:
                raise ClaimInvalid("claim held by another worker")
            return req.to_dict()

    def renew_claim(self, worker_id: str, request_id: str, claim_id: str) -> dict:
        with self._lock:
            req = self._requests.get(request_id)
            if req is None:
                raise NotFound(f"no such request {request_id!r}")
            if req.claim is not None and req.claim.worker_id != worker_id:
                raise Conflict("renew by a non-holder")
            updated = transition(req, "renew", now_ms=self.clock(),
                                 claim_id=claim_id, lease_ms=self.lease_ms)
            self._emit([("request_claimed",
                         {"request_id": request_id,
                          "claim": updated.claim.to_dict(),
                          "renewal": True})])
            return updated.claim.to_dict()

    def cancel_claim(self, worker_id: str, request_id: str, claim_id: str) -> dict:
        with self._lock:
            req = self._requests.get(request_id)
            if req is None:
                raise NotFound(f"no such request {request_id!r}")
            if (req.state != "claimed" or req.claim is None
                    or req.claim.claim_id != claim_id
                    or req.claim.worker_id != worker_id):
                raise ClaimInvalid("cancel requires the live claim holder")
            self._emit([("request_reopened",
                         {"request_id": request_id, "cause": "cancelled"})])
            return self._requests[request_id].to_dict()

    # ---------------------------------------------------------- recordings

    def upload_recording(self, worker_id: str, claim_id: str,
                         log_bytes: bytes) -> str:
        """Validate, store, and journal one episode recording.

        Durability order: object bytes first (atomic rename), then the
        recording_uploaded + request_completed pair in a single journal
        write. A crash in between leaves an orphan object file and a still
        claimed request, which lease expiry reopens; nothing references the
        orphan.
        """
        if isinstance(log_bytes, str):
            log_bytes = log_bytes.encode("utf-8")
        with self._lock:
            prior = self._claim_uploads.get(claim_id)
            if prior is not None:
                meta = self._recordings[prior]
                if meta["worker_id"] != worker_id:
                    raise ClaimInvalid("claim held by another worker")
                # Heal the rare torn-write state where the upload was
                # journaled but the completion line was lost.
                req = self._requests.get(meta["request_id"])
                if (req is not None and req.claim is not None
                        and req.claim.claim_id == claim_id):
                    self._emit([("request_completed",
                                 {"request_id": req.request_id,
                                  "recording_id": prior})])
                return prior

            request_id = self._active_claims.get(claim_id)
            if request_id is None:
                raise ClaimInvalid(f"no live claim {claim_id!r}")
            req = self._requests[request_id]
            if req.claim.worker_id != worker_id:
                raise ClaimInvalid("claim held by another worker")
            now = self.clock()
            if req.claim.expired(now):
                raise ClaimInvalid("claim lease expired")

            if len(log_bytes) > MAX_UPLOAD_BYTES:
                raise ValidationFailed(
                    [f"episode log is {len(log_bytes)} bytes; "
                     f"limit is {MAX_UPLOAD_BYTES}"])
            try:
                log = parse_episode_log(log_bytes.decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise ValidationFailed(["episode log is not UTF-8"]) from exc
            except (MalformedLog, ParseError) as exc:
                raise ValidationFailed(
                    [f"unparseable episode log: {exc}"]) from exc
            violations = validate_episode_log(log)
            if violations:
                raise ValidationFailed(violations)

            recording_id = "rec-" + uuid.uuid4().hex[:16]
            path = os.path.join(self._recordings_dir, recording_id + ".jsonl")
            try:
                _write_durable(path, log_bytes, fault=self._fault_hook)
            except OSError as exc:
                raise StorageFailed(f"recording write failed: {exc}") from exc

            meta = {
                "recording_id": recording_id,
                "request_id": request_id,
                "claim_id": claim_id,
                "worker_id": worker_id,
                "policy_id": req.policy_id,
                "layout_seed": req.task.layout_seed,
                "steps": len(log.steps),
                "duration_s": float(log.duration_s),
                "size_bytes": len(log_bytes),
                "sha256": hashlib.sha256(log_bytes).hexdigest(),
            }
            self._emit([
                ("recording_uploaded", meta),
                ("request_completed", {"request_id": request_id,
                                       "recording_id": recording_id}),
            ])
            return recording_id

    def get_recording(self, recording_id: str) -> tuple:
        with self._lock:
            meta = self._recordings.get(recording_id)
        if meta is None:
            raise NotFound(f"no such recording {recording_id!r}")
        path = os.path.join(self._recordings_dir, recording_id + ".jsonl")
        try:
            with open(path, "rb") as f:
                return f.read(), dict(meta)
        except OSError as exc:
            raise StorageFailed(f"recording bytes missing: {exc}") from exc

    def list_recordings(self) -> list:
        with self._lock:
            return [dict(m) for m in self._recordings.values()]

    # ------------------------------------------------------------ policies

    def publish_policy(self, blob: bytes, content_hash: str = None) -> dict:
        """Store a policy snapshot under the next monotone id."""
        digest = hashlib.sha256(blob).hexdigest()
        if content_hash is not None and content_hash != digest:
            raise PublishFailed(
                f"content hash mismatch: stated {content_hash[:12]}..., "
                f"stored bytes hash {digest[:12]}...")
        with self._lock:
            policy_id = max(self._policies, default=0) + 1
            path = os.path.join(self._policies_dir, f"{policy_id}.bin")
            try:
                _write_durable(path, blob, fault=self._fault_hook)
            except OSError as exc:
                raise StorageFailed(f"policy write failed: {exc}") from exc
            meta = {
                "policy_id": policy_id,
                "content_hash": digest,
                "size_bytes": len(blob),
                "uri": f"/v1/policies/{policy_id}",
            }
            self._emit([("policy_published", meta)])
            return dict(meta)

    def get_policy(self, policy_id) -> tuple:
        """Fetch snapshot bytes + meta by id or "latest"."""
        with self._lock:
            if policy_id == "latest":
                if not self._policies:
                    raise NotFound("no policies published yet")
                policy_id = max(self._policies)
            try:
                policy_id = int(policy_id)
            except (TypeError, ValueError):
                raise NotFound(f"no such policy {policy_id!r}")
            meta = self._policies.get(policy_id)
            if meta is None:
                raise NotFound(f"no such policy {policy_id}")
        path = os.path.join(self._policies_dir, f"{policy_id}.bin")
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as exc:
            raise StorageFailed(f"policy bytes missing: {exc}") from exc
        if hashlib.sha256(blob).hexdigest() != meta["content_hash"]:
            raise StorageFailed(f"policy {policy_id} bytes corrupt on disk")
        return blob, dict(meta)

    # ------------------------------------------------------- events, stats

    def poll_events(self, since: int, timeout_ms: int = 0,
                    limit: int = 500) -> list:
        """Events with cursor > since, oldest first; blocks up to timeout_ms.

        Cursors are dense, so the slice is an index into the event list.
        """
        since = max(0, int(since))
        deadline = time.monotonic() + max(0, timeout_ms) / 1000.0
        with self._cond:
            while True:
                if since < len(self._events):
                    return list(self._events[since:since + limit])
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed:
                    return []
                self._cond.wait(remaining)

    def latest_cursor(self) -> int:
        with self._lock:
            return len(self._events)

    def worker_stats(self) -> list:
        """Recording count and total recorded seconds per worker.

        Derived from the journal, so it equals the aggregation over stored
        recordings at all times, including after restart. Workers with an
        account but no recordings report zeros.
        """
        with self._lock:
            agg = {}
            for acct in self._accounts.values():
                agg.setdefault(acct["worker_id"], [0, 0.0])
            for meta in self._recordings.values():
                row = agg.setdefault(meta["worker_id"], [0, 0.0])
                row[0] += 1
                row[1] += float(meta["duration_s"])
            return [
                {"worker_id": wid, "recording_count": count,
                 "total_recorded_duration_s": duration}
                for wid, (count, duration) in sorted(agg.items())
            ]

    def wake_all(self) -> None:
        """Kick every blocked long-poll (used at shutdown)."""
        with self._cond:
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
            try:
                self._journal.close()
            except OSError:
                pass
