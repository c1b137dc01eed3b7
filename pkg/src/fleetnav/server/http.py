"""HTTP/1.1 + JSON front end over the fleet store.

Endpoints (Bearer token required everywhere except login):

    POST /v1/auth/login                 {username, password} -> token doc
    GET  /v1/requests                   open/claimed requests the caller may work
    POST /v1/requests                   create a recording request
    POST /v1/requests/{id}/claim        -> claim doc
    POST /v1/requests/{id}/renew        {claim_id} -> claim doc
    POST /v1/requests/{id}/cancel       {claim_id} -> request doc
    POST /v1/recordings                 multipart: "meta" JSON + "log" bytes
    GET  /v1/recordings/{id}            stored episode log bytes
    GET  /v1/policies/{id|latest}       snapshot bytes; hash/id in headers
    POST /v1/policies                   raw snapshot bytes -> policy meta
    GET  /v1/events?since=&timeout_ms=  long-poll event feed
    GET  /v1/stats/workers              per-worker recording stats

Errors come back as {"error": {"kind", "message", "violations"?}} with the
status the error class maps to; oversize uploads are cut off at the
Content-Length check with 413 before the body is read.
"""

from __future__ import annotations

import email.parser
import email.policy
import json
import re
import socket
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..errors import (
    AuthExpired,
    AuthFailed,
    ClaimInvalid,
    Conflict,
    FleetNavError,
    GenerationFailed,
    InvalidArgument,
    InvalidTransition,
    NotFound,
    NotPermitted,
    PublishFailed,
    SchemaError,
    StorageFailed,
    ValidationFailed,
)
from ..procgen import GenConfig, generate_layout
from ..protocol import TaskDescriptor
from ..sim import SimConfig
from .store import MAX_UPLOAD_BYTES, FleetStore
from .teleop import DEADMAN_S, TeleopSession
from .ws import OP_CLOSE, OP_TEXT, ConnectionClosed, ProtocolViolation, WsConnection, accept_key

TELEOP_DROP_PAUSE_S = 10.0

MAX_JSON_BODY = 1 * 1024 * 1024
MAX_POLL_TIMEOUT_MS = 60_000

# Subclasses must precede their bases: AuthExpired before AuthFailed.
_STATUS_MAP = (
    (SchemaError, 400, "schema_error"),
    (ValidationFailed, 400, "validation_failed"),
    (InvalidArgument, 400, "bad_request"),
    (AuthExpired, 401, "auth_expired"),
    (AuthFailed, 401, "auth_failed"),
    (NotPermitted, 403, "not_permitted"),
    (NotFound, 404, "not_found"),
    (Conflict, 409, "conflict"),
    (InvalidTransition, 409, "invalid_transition"),
    (ClaimInvalid, 409, "claim_invalid"),
    (PublishFailed, 400, "publish_failed"),
    (StorageFailed, 500, "storage_failed"),
)


def _error_doc(exc: Exception) -> tuple:
    for klass, status, kind in _STATUS_MAP:
        if isinstance(exc, klass):
            doc = {"kind": kind, "message": str(exc)}
            if isinstance(exc, ValidationFailed):
                doc["violations"] = exc.violations
            return status, doc
    return 500, {"kind": "internal", "message": str(exc)}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "fleetnav"

    # --------------------------------------------------------------- plumbing

    @property
    def store(self) -> FleetStore:
        return self.server.store

    def log_message(self, fmt, *args):  # quiet by default
        if getattr(self.server, "verbose", False):
            super().log_message(fmt, *args)

    def _send(self, status: int, body: bytes, content_type: str,
              extra_headers=()) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for key, value in extra_headers:
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, doc, extra_headers=()) -> None:
        self._send(status, json.dumps(doc).encode("utf-8"),
                   "application/json", extra_headers)

    def _send_exc(self, exc: Exception) -> None:
        status, doc = _error_doc(exc)
        self._send_json(status, {"error": doc})

    def _body(self, limit: int = MAX_JSON_BODY) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length > limit:
            raise _Oversize(length, limit)
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        raw = self._body()
        if not raw:
            return {}
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise SchemaError(f"request body is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise SchemaError("request body must be a JSON object")
        return doc

    def _authenticate(self) -> str:
        header = self.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            raise AuthFailed("missing bearer token")
        return self.store.authenticate(header[len("Bearer "):].strip())

    def _query(self) -> dict:
        if "?" not in self.path:
            return {}
        out = {}
        for pair in self.path.split("?", 1)[1].split("&"):
            if "=" in pair:
                key, value = pair.split("=", 1)
                out[key] = value
        return out

    # ----------------------------------------------------------------- routes

    def do_GET(self):
        try:
            self._route("GET")
        except Exception as exc:  # every error becomes a JSON error body
            self._send_exc(exc)

    def do_POST(self):
        try:
            self._route("POST")
        except _Oversize as exc:
            self._send_json(413, {"error": {
                "kind": "oversize",
                "message": f"body is {exc.length} bytes; limit {exc.limit}"}})
        except Exception as exc:
            self._send_exc(exc)

    def _route(self, method: str) -> None:
        path = self.path.split("?", 1)[0].rstrip("/")
        if method == "POST" and path == "/v1/auth/login":
            return self._login()

        m = re.fullmatch(r"/v1/teleop/([^/]+)", path)
        if method == "GET" and m:
            return self._teleop(m.group(1))

        worker_id = self._authenticate()
        if method == "GET" and path == "/v1/requests":
            return self._send_json(
                200, {"requests": self.store.list_requests(worker_id)})
        if method == "POST" and path == "/v1/requests":
            return self._create_request()
        m = re.fullmatch(r"/v1/requests/([^/]+)/(claim|renew|cancel)", path)
        if method == "POST" and m:
            return self._claim_action(worker_id, m.group(1), m.group(2))
        if method == "POST" and path == "/v1/recordings":
            return self._upload(worker_id)
        m = re.fullmatch(r"/v1/recordings/([^/]+)", path)
        if method == "GET" and m:
            blob, meta = self.store.get_recording(m.group(1))
            return self._send(200, blob, "application/jsonl",
                              [("X-Recording-Id", meta["recording_id"]),
                               ("X-Request-Id", meta["request_id"]),
                               ("X-Content-Hash", meta["sha256"])])
        m = re.fullmatch(r"/v1/policies/([^/]+)", path)
        if method == "GET" and m:
            blob, meta = self.store.get_policy(m.group(1))
            return self._send(200, blob, "application/octet-stream",
                              [("X-Policy-Id", str(meta["policy_id"])),
                               ("X-Content-Hash", meta["content_hash"])])
        if method == "POST" and path == "/v1/policies":
            return self._publish()
        if method == "GET" and path == "/v1/events":
            return self._events()
        if method == "GET" and path == "/v1/stats/workers":
            return self._send_json(200, {"workers": self.store.worker_stats()})
        raise NotFound(f"no route {method} {path}")

    # ---------------------------------------------------------------- actions

    def _login(self) -> None:
        doc = self._json_body()
        username = doc.get("username")
        password = doc.get("password")
        if not isinstance(username, str) or not isinstance(password, str):
            raise SchemaError("login needs string username and password")
        self._send_json(200, self.store.login(username, password))

    def _create_request(self) -> None:
        doc = self._json_body()
        if "task" not in doc or "policy_id" not in doc:
            raise SchemaError("create request needs task and policy_id")
        task = TaskDescriptor.from_dict(doc["task"])
        created = self.store.create_request(
            task, policy_id=doc["policy_id"],
            policy_hash=doc.get("policy_hash"),
            policy_uri=doc.get("policy_uri"),
            permitted_workers=doc.get("permitted_workers", ()))
        self._send_json(200, created)

    def _claim_action(self, worker_id: str, request_id: str, action: str) -> None:
        if action == "claim":
            return self._send_json(
                200, self.store.claim_request(worker_id, request_id))
        claim_id = self._json_body().get("claim_id")
        if not isinstance(claim_id, str):
            raise SchemaError(f"{action} needs claim_id")
        if action == "renew":
            return self._send_json(
                200, self.store.renew_claim(worker_id, request_id, claim_id))
        self._send_json(
            200, self.store.cancel_claim(worker_id, request_id, claim_id))

    def _upload(self, worker_id: str) -> None:
        # Multipart small-overhead allowance on top of the log size cap.
        body = self._body(limit=MAX_UPLOAD_BYTES + 64 * 1024)
        ctype = self.headers.get("Content-Type", "")
        if not ctype.startswith("multipart/"):
            raise SchemaError("upload must be multipart/form-data")
        parts = _parse_multipart(ctype, body)
        if "meta" not in parts or "log" not in parts:
            raise SchemaError('upload needs "meta" and "log" parts')
        try:
            meta = json.loads(parts["meta"].decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise SchemaError(f"meta part is not valid JSON: {exc}")
        claim_id = meta.get("claim_id")
        if not isinstance(claim_id, str):
            raise SchemaError("meta.claim_id is required")
        recording_id = self.store.upload_recording(
            worker_id, claim_id, parts["log"])
        self._send_json(200, {"recording_id": recording_id})

    def _publish(self) -> None:
        blob = self._body(limit=MAX_UPLOAD_BYTES)
        meta = self.store.publish_policy(
            blob, content_hash=self.headers.get("X-Content-Hash"))
        self._send_json(200, meta)

    def _events(self) -> None:
        query = self._query()
        try:
            since = int(query.get("since", 0))
            timeout_ms = int(query.get("timeout_ms", 0))
        except ValueError:
            raise SchemaError("since and timeout_ms must be integers")
        timeout_ms = min(timeout_ms, MAX_POLL_TIMEOUT_MS)
        events = self.store.poll_events(since, timeout_ms=timeout_ms)
        self._send_json(200, {
            "events": [ev.to_dict() for ev in events],
            "latest_cursor": self.store.latest_cursor(),
        })

    # ----------------------------------------------------------------- teleop

    def _teleop(self, claim_id: str) -> None:
        """Upgrade to a WebSocket and host one teleoperated episode.

        Browsers cannot set Authorization on a WebSocket, so the bearer
        token may ride the query string instead. Exactly one live session
        per claim; a dropped session stays resumable for a grace window
        before the claim is released.
        """
        query = self._query()
        token = query.get("token")
        if token:
            worker_id = self.store.authenticate(token)
        else:
            worker_id = self._authenticate()

        if self.headers.get("Upgrade", "").lower() != "websocket":
            raise InvalidArgument("teleop endpoint speaks websocket only")
        key = self.headers.get("Sec-WebSocket-Key")
        if not key:
            raise SchemaError("missing Sec-WebSocket-Key")
        if self.headers.get("Sec-WebSocket-Version", "").strip() != "13":
            raise SchemaError("only websocket version 13 is supported")

        req_doc = self.store.claimed_request(worker_id, claim_id)
        slot = self._adopt_slot(claim_id, worker_id, req_doc, query)

        self.send_response(101, "Switching Protocols")
        self.send_header("Upgrade", "websocket")
        self.send_header("Connection", "Upgrade")
        self.send_header("Sec-WebSocket-Accept", accept_key(key))
        self.end_headers()
        self.close_connection = True

        conn = WsConnection(self.connection, mask_outgoing=False,
                            require_masked=True, initial=self._drain_rfile(),
                            max_payload=64 * 1024)
        try:
            self._drive_session(conn, slot, worker_id, claim_id,
                                req_doc["request_id"])
        except (ConnectionClosed, ProtocolViolation, socket.timeout):
            self._pause_then_release(slot, worker_id, claim_id,
                                     req_doc["request_id"])

    def _drain_rfile(self) -> bytes:
        """Bytes the header parser buffered past the upgrade request."""
        self.connection.settimeout(0.0)
        try:
            leftover = self.rfile.peek() or b""
        except (BlockingIOError, socket.timeout, OSError):
            leftover = b""
        finally:
            self.connection.settimeout(None)
        if leftover:
            self.rfile.read(len(leftover))
        return leftover

    def _adopt_slot(self, claim_id: str, worker_id: str, req_doc: dict,
                    query: dict):
        """Create the session for this claim, or resume a paused one."""
        srv = self.server
        with srv.teleop_lock:
            slot = srv.teleop_sessions.get(claim_id)
            if slot is not None:
                if slot.owner is not None:
                    raise Conflict("an active teleop session holds this claim")
                slot.owner = threading.get_ident()
                evt, slot.resume_evt = slot.resume_evt, threading.Event()
                evt.set()
                return slot
            try:
                layout = generate_layout(srv.gen_config,
                                         seed=req_doc["task"]["layout_seed"])
            except GenerationFailed as exc:
                raise InvalidArgument(f"layout seed is unusable: {exc}")
            try:
                seed = int(query.get("seed", ""))
            except ValueError:
                seed = int(uuid.uuid4().int % (2 ** 62))
            session = TeleopSession(
                layout, srv.sim_config, seed,
                session_id="tel-" + uuid.uuid4().hex[:16],
                worker_id=worker_id,
                request_id=req_doc["request_id"],
                policy_id=req_doc["policy_id"],
                deadman_s=srv.teleop_deadman_s)
            slot = _TeleopSlot(session, threading.get_ident(),
                               threading.Event())
            srv.teleop_sessions[claim_id] = slot
            return slot

    def _release_slot(self, claim_id: str) -> None:
        with self.server.teleop_lock:
            self.server.teleop_sessions.pop(claim_id, None)

    def _drive_session(self, conn: WsConnection, slot, worker_id: str,
                       claim_id: str, request_id: str) -> None:
        session = slot.session
        dt = session.state.config.dt
        conn.send_text(json.dumps(session.review_frame()))
        next_tick = time.monotonic() + dt
        while True:
            if session.phase == "driving":
                budget = next_tick - time.monotonic()
                if budget > 0:
                    msg = conn.recv(timeout=budget)
                    if msg is not None:
                        self._teleop_message(conn, session, msg)
                    continue
                frame = session.tick(time.monotonic())
                conn.send_text(json.dumps(frame))
                next_tick += dt
                if next_tick < time.monotonic() - 5 * dt:
                    # Fell badly behind (suspended process); do not burst.
                    next_tick = time.monotonic() + dt
            elif session.phase == "review":
                msg = conn.recv(timeout=1.0)
                if msg is not None:
                    self._review_message(conn, session, worker_id, claim_id,
                                         request_id, msg)
            else:  # done
                if session.outcome == "cancelled":
                    self._quiet_cancel(worker_id, request_id, claim_id)
                self._release_slot(claim_id)
                conn.send_close(1000)
                return

    def _teleop_message(self, conn: WsConnection, session, msg) -> None:
        opcode, payload = msg
        if opcode == OP_CLOSE:
            raise ConnectionClosed("client closed")
        if opcode != OP_TEXT:
            raise ProtocolViolation("teleop frames must be text")
        try:
            doc = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise ProtocolViolation("teleop frame is not valid JSON")
        kind = doc.get("kind", "teleop") if isinstance(doc, dict) else None
        if kind != "teleop":
            conn.send_text(json.dumps(
                {"kind": "error", "message": f"unexpected {kind!r} while driving"}))
            return
        try:
            fresh = session.apply_frame(doc, time.monotonic())
        except SchemaError as exc:
            conn.send_text(json.dumps({"kind": "error", "message": str(exc)}))
            raise ProtocolViolation(str(exc))
        if not fresh:
            return  # stale seq, silently discarded
        if doc.get("session_id") != session.session_id:
            conn.send_text(json.dumps(
                {"kind": "error", "message": "frame for a different session"}))

    def _review_message(self, conn: WsConnection, session, worker_id: str,
                        claim_id: str, request_id: str, msg) -> None:
        opcode, payload = msg
        if opcode == OP_CLOSE:
            raise ConnectionClosed("client closed during review")
        if opcode != OP_TEXT:
            raise ProtocolViolation("review messages must be text")
        try:
            doc = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise ProtocolViolation("review message is not valid JSON")
        kind = doc.get("kind") if isinstance(doc, dict) else None
        if kind == "confirm":
            try:
                recording_id = self.store.upload_recording(
                    worker_id, claim_id, session.log_text())
            except FleetNavError as exc:
                status, edoc = _error_doc(exc)
                conn.send_text(json.dumps({"kind": "error", **edoc}))
                raise ConnectionClosed(f"upload failed: {exc}")
            session.phase = "done"
            session.outcome = "uploaded"
            conn.send_text(json.dumps(
                {"kind": "uploaded", "recording_id": recording_id}))
        elif kind == "discard":
            session.phase = "done"
            session.outcome = "discarded"
            self._quiet_cancel(worker_id, request_id, claim_id)
            conn.send_text(json.dumps({"kind": "discarded"}))
        else:
            conn.send_text(json.dumps(
                {"kind": "error", "message": f"unexpected {kind!r} in review"}))

    def _quiet_cancel(self, worker_id: str, request_id: str,
                      claim_id: str) -> None:
        # Reopen the request; a lease that already expired reopened it.
        try:
            self.store.cancel_claim(worker_id, request_id, claim_id)
        except FleetNavError:
            pass

    def _pause_then_release(self, slot, worker_id: str, claim_id: str,
                            request_id: str) -> None:
        """Connection dropped: pause the sim, then cancel unless resumed."""
        session = slot.session
        srv = self.server
        with srv.teleop_lock:
            if slot.owner != threading.get_ident():
                return
            if session.phase == "done":
                srv.teleop_sessions.pop(claim_id, None)
                return
            slot.owner = None
            evt = slot.resume_evt
        evt.wait(srv.teleop_pause_s)
        with srv.teleop_lock:
            if slot.owner is not None:
                return  # another connection resumed the session
            srv.teleop_sessions.pop(claim_id, None)
        self._quiet_cancel(worker_id, request_id, claim_id)


class _TeleopSlot:
    """One claim's live teleop session plus its connection-ownership state.

    owner is the thread id of the connection currently driving, or None
    while the session waits out the drop grace window. resume_evt wakes
    the waiting releaser when a reconnect adopts the slot.
    """

    __slots__ = ("session", "owner", "resume_evt")

    def __init__(self, session: TeleopSession, owner: int,
                 resume_evt: threading.Event):
        self.session = session
        self.owner = owner
        self.resume_evt = resume_evt


class _Oversize(Exception):
    def __init__(self, length: int, limit: int):
        super().__init__(f"{length} > {limit}")
        self.length = length
        self.limit = limit


def _parse_multipart(content_type: str, body: bytes) -> dict:
    """Name -> bytes for each form part, via the stdlib MIME parser."""
    prefix = (f"Content-Type: {content_type}\r\n"
              "MIME-Version: 1.0\r\n\r\n").encode("latin-1")
    msg = email.parser.BytesParser(policy=email.policy.default).parsebytes(
        prefix + body)
    if not msg.is_multipart():
        raise SchemaError("malformed multipart body")
    parts = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            parts[name] = part.get_payload(decode=True) or b""
    return parts


class FleetServer:
    """Threaded HTTP server wrapper: start(), url, stop()."""

    def __init__(self, store: FleetStore, host: str = "127.0.0.1",
                 port: int = 0, verbose: bool = False,
                 sim_config: SimConfig | None = None,
                 gen_config: GenConfig | None = None,
                 teleop_deadman_s: float = DEADMAN_S,
                 teleop_pause_s: float = TELEOP_DROP_PAUSE_S):
        self.store = store
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.store = store
        self.httpd.verbose = verbose
        self.httpd.sim_config = sim_config or SimConfig()
        self.httpd.gen_config = gen_config or GenConfig()
        self.httpd.teleop_deadman_s = teleop_deadman_s
        self.httpd.teleop_pause_s = teleop_pause_s
        self.httpd.teleop_sessions = {}
        self.httpd.teleop_lock = threading.Lock()
        self.host, self.port = self.httpd.server_address[:2]
        self._thread = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "FleetServer":
        self._thread = threading.Thread(
            target=self.httpd.serve_forever, kwargs={"poll_interval": 0.1},
            name="fleet-http", daemon=True)
        self._thread.start()
        return self

    def stop(self, close_store: bool = True) -> None:
        """Stop accepting, wake long-polls, join the accept loop."""
        self.httpd.shutdown()
        if close_store:
            self.store.close()
        else:
            self.store.wake_all()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
