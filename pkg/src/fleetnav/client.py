"""HTTP client for the fleet server.

Thin typed wrapper: JSON in/out, bearer token handling, and translation of
the server's error envelope back into the same exception classes the server
raised, so client code handles Conflict or ClaimInvalid identically whether
the store is in-process or behind HTTP. Transport-level failures surface as
requests exceptions and are the caller's retry concern.
"""

from __future__ import annotations

import json

import requests

from .errors import (
    AuthExpired,
    AuthFailed,
    ClaimInvalid,
    Conflict,
    InvalidArgument,
    InvalidTransition,
    NotFound,
    NotPermitted,
    PublishFailed,
    SchemaError,
    StorageFailed,
    ValidationFailed,
)
from .protocol import Claim, FleetEvent, RecordingRequest, TaskDescriptor

_KIND_MAP = {
    "schema_error": SchemaError,
    "bad_request": InvalidArgument,
    "auth_failed": AuthFailed,
    "auth_expired": AuthExpired,
    "not_permitted": NotPermitted,
    "not_found": NotFound,
    "conflict": Conflict,
    "invalid_transition": InvalidTransition,
    "claim_invalid": ClaimInvalid,
    "publish_failed": PublishFailed,
    "storage_failed": StorageFailed,
}


def _raise_from_response(resp: requests.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        doc = resp.json().get("error", {})
    except ValueError:
        doc = {}
    kind = doc.get("kind", "")
    message = doc.get("message", f"HTTP {resp.status_code}")
    if kind == "validation_failed":
        raise ValidationFailed(doc.get("violations") or [message])
    if kind == "oversize":
        raise ValidationFailed([message])
    klass = _KIND_MAP.get(kind)
    if klass is not None:
        raise klass(message)
    raise StorageFailed(f"HTTP {resp.status_code}: {message}")


class FleetClient:
    def __init__(self, base_url: str, timeout_s: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = float(timeout_s)
        self.token = None
        self.worker_id = None
        self._session = requests.Session()

    # ---------------------------------------------------------------- verbs

    def _headers(self) -> dict:
        if self.token is None:
            return {}
        return {"Authorization": f"Bearer {self.token}"}

    def _get(self, path: str, timeout: float = None) -> requests.Response:
        resp = self._session.get(self.base_url + path, headers=self._headers(),
                                 timeout=timeout or self.timeout_s)
        _raise_from_response(resp)
        return resp

    def _post(self, path: str, **kwargs) -> requests.Response:
        kwargs.setdefault("timeout", self.timeout_s)
        resp = self._session.post(self.base_url + path,
                                  headers={**self._headers(),
                                           **kwargs.pop("headers", {})},
                                  **kwargs)
        _raise_from_response(resp)
        return resp

    # ------------------------------------------------------------------ auth

    def login(self, username: str, password: str) -> str:
        doc = self._post("/v1/auth/login",
                         json={"username": username, "password": password}).json()
        self.token = doc["token"]
        self.worker_id = doc["worker_id"]
        return self.worker_id

    # -------------------------------------------------------------- requests

    def list_requests(self) -> list:
        doc = self._get("/v1/requests").json()
        return [RecordingRequest.from_dict(d) for d in doc["requests"]]

    def create_request(self, task: TaskDescriptor, policy_id: int,
                       permitted_workers=()) -> RecordingRequest:
        doc = self._post("/v1/requests", json={
            "task": task.to_dict(),
            "policy_id": policy_id,
            "permitted_workers": list(permitted_workers),
        }).json()
        return RecordingRequest.from_dict(doc)

    def claim(self, request_id: str) -> Claim:
        return Claim.from_dict(
            self._post(f"/v1/requests/{request_id}/claim").json())

    def renew(self, request_id: str, claim_id: str) -> Claim:
        return Claim.from_dict(
            self._post(f"/v1/requests/{request_id}/renew",
                       json={"claim_id": claim_id}).json())

    def cancel(self, request_id: str, claim_id: str) -> RecordingRequest:
        return RecordingRequest.from_dict(
            self._post(f"/v1/requests/{request_id}/cancel",
                       json={"claim_id": claim_id}).json())

    # ------------------------------------------------------------ recordings

    def upload_recording(self, claim_id: str, log_bytes: bytes) -> str:
        meta = json.dumps({"claim_id": claim_id})
        files = {
            "meta": (None, meta, "application/json"),
            "log": ("episode.jsonl", log_bytes, "application/jsonl"),
        }
        return self._post("/v1/recordings", files=files).json()["recording_id"]

    def get_recording(self, recording_id: str) -> bytes:
        return self._get(f"/v1/recordings/{recording_id}").content

    # -------------------------------------------------------------- policies

    def publish_policy(self, blob: bytes, content_hash: str = None) -> dict:
        headers = {"Content-Type": "application/octet-stream"}
        if content_hash:
            headers["X-Content-Hash"] = content_hash
        return self._post("/v1/policies", data=blob, headers=headers).json()

    def get_policy(self, policy_id="latest") -> tuple:
        """Returns (blob, policy_id, content_hash as advertised)."""
        resp = self._get(f"/v1/policies/{policy_id}")
        return (resp.content, int(resp.headers["X-Policy-Id"]),
                resp.headers["X-Content-Hash"])

    # ---------------------------------------------------------- events/stats

    def poll_events(self, since: int, timeout_ms: int = 0) -> list:
        read_timeout = self.timeout_s + timeout_ms / 1000.0
        doc = self._get(f"/v1/events?since={int(since)}&timeout_ms={int(timeout_ms)}",
                        timeout=read_timeout).json()
        return [FleetEvent.from_dict(d) for d in doc["events"]]

    def worker_stats(self) -> list:
        return self._get("/v1/stats/workers").json()["workers"]

    def close(self) -> None:
        self._session.close()
