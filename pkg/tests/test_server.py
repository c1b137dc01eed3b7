"""HTTP front end: auth enforcement, error mapping, long-poll, contention."""

import http.client
import threading
import time

import pytest
import requests

from fleetnav.client import FleetClient
from fleetnav.errors import (
    AuthFailed,
    ClaimInvalid,
    Conflict,
    NotFound,
    PublishFailed,
    SchemaError,
    ValidationFailed,
)
from fleetnav.protocol import TaskDescriptor
from fleetnav.server import FleetServer, FleetStore

from test_store import FakeClock, valid_log_text

LEASE_MS = 10_000


@pytest.fixture()
def clock():
    return FakeClock()


@pytest.fixture()
def server(tmp_path, clock):
    store = FleetStore(str(tmp_path / "data"), clock=clock, lease_ms=LEASE_MS)
    store.create_account("alice", "alice-pw")
    store.create_account("bob", "bob-pw")
    srv = FleetServer(store).start()
    yield srv
    srv.stop()


@pytest.fixture()
def alice(server):
    client = FleetClient(server.url)
    client.login("alice", "alice-pw")
    return client


def seeded_request(client):
    meta = client.publish_policy(b"policy-blob")
    return client.create_request(TaskDescriptor(layout_seed=11),
                                 policy_id=meta["policy_id"])


# ------------------------------------------------------------------- auth


def test_every_endpoint_requires_token(server):
    probes = [
        ("GET", "/v1/requests"),
        ("POST", "/v1/requests"),
        ("POST", "/v1/requests/req-x/claim"),
        ("POST", "/v1/requests/req-x/renew"),
        ("POST", "/v1/requests/req-x/cancel"),
        ("POST", "/v1/recordings"),
        ("GET", "/v1/recordings/rec-x"),
        ("GET", "/v1/policies/latest"),
        ("POST", "/v1/policies"),
        ("GET", "/v1/events"),
        ("GET", "/v1/stats/workers"),
    ]
    for method, path in probes:
        resp = requests.request(method, server.url + path, timeout=5)
        assert resp.status_code == 401, (method, path, resp.status_code)
        assert resp.json()["error"]["kind"] == "auth_failed"
        resp = requests.request(method, server.url + path, timeout=5,
                                headers={"Authorization": "Bearer junk"})
        assert resp.status_code == 401, (method, path)


def test_login_flow_and_expired_token(server, clock):
    resp = requests.post(server.url + "/v1/auth/login",
                         json={"username": "alice", "password": "nope"},
                         timeout=5)
    assert resp.status_code == 401
    client = FleetClient(server.url)
    with pytest.raises(AuthFailed):
        client.login("alice", "nope")
    client.login("alice", "alice-pw")
    clock.advance(server.store.token_ttl_ms + 1)
    resp = requests.get(server.url + "/v1/requests", timeout=5,
                        headers={"Authorization": f"Bearer {client.token}"})
    assert resp.status_code == 401
    assert resp.json()["error"]["kind"] == "auth_expired"


# ---------------------------------------------------------------- endpoints


def test_request_claim_upload_roundtrip(alice, clock):
    req = seeded_request(alice)
    listed = alice.list_requests()
    assert [r.request_id for r in listed] == [req.request_id]
    claim = alice.claim(req.request_id)
    assert claim.expires_at == clock() + LEASE_MS

    recording_id = alice.upload_recording(claim.claim_id,
                                          valid_log_text().encode())
    assert alice.upload_recording(claim.claim_id,
                                  valid_log_text().encode()) == recording_id
    assert alice.get_recording(recording_id) == valid_log_text().encode()
    assert alice.list_requests() == []
    stats = {row["worker_id"]: row for row in alice.worker_stats()}
    assert stats["alice"]["recording_count"] == 1


def test_error_statuses_surface_as_typed_exceptions(server, alice):
    with pytest.raises(NotFound):
        alice.claim("req-missing")
    with pytest.raises(NotFound):
        alice.get_policy(123)
    with pytest.raises(SchemaError):
        alice._post("/v1/requests", json={"policy_id": 1})  # no task field
    req = seeded_request(alice)
    claim = alice.claim(req.request_id)
    bob = FleetClient(server.url)
    bob.login("bob", "bob-pw")
    with pytest.raises(Conflict):
        bob.claim(req.request_id)
    with pytest.raises(ClaimInvalid):
        bob.upload_recording(claim.claim_id, valid_log_text().encode())
    with pytest.raises(ValidationFailed) as err:
        alice.upload_recording(claim.claim_id, b"garbage")
    assert err.value.violations
    with pytest.raises(PublishFailed):
        alice.publish_policy(b"blob", content_hash="0" * 64)
    resp = requests.get(server.url + "/v1/nope", timeout=5,
                        headers={"Authorization": f"Bearer {alice.token}"})
    assert resp.status_code == 404


def test_permission_filtered_listing(server, alice):
    meta = alice.publish_policy(b"p")
    alice.create_request(TaskDescriptor(layout_seed=1),
                         policy_id=meta["policy_id"],
                         permitted_workers=["bob"])
    assert alice.list_requests() == []
    bob = FleetClient(server.url)
    bob.login("bob", "bob-pw")
    assert len(bob.list_requests()) == 1


def test_renew_and_cancel_over_http(alice, clock):
    req = seeded_request(alice)
    claim = alice.claim(req.request_id)
    clock.advance(1_000)
    renewed = alice.renew(req.request_id, claim.claim_id)
    assert renewed.expires_at == clock() + LEASE_MS
    reopened = alice.cancel(req.request_id, claim.claim_id)
    assert reopened.state == "open" and reopened.claim is None


def test_policy_bytes_and_headers(alice):
    import hashlib

    blob = b"\x00\x01snapshot-bytes"
    meta = alice.publish_policy(blob)
    got, policy_id, advertised = alice.get_policy("latest")
    assert got == blob
    assert policy_id == meta["policy_id"]
    assert advertised == hashlib.sha256(blob).hexdigest()


def test_oversize_upload_rejected_at_content_length(server, alice):
    # Announce a huge body without sending it: the server must answer 413
    # from the header check alone.
    conn = http.client.HTTPConnection(server.host, server.port, timeout=5)
    conn.putrequest("POST", "/v1/recordings")
    conn.putheader("Authorization", f"Bearer {alice.token}")
    conn.putheader("Content-Type", "multipart/form-data; boundary=xyz")
    conn.putheader("Content-Length", str(80 * 1024 * 1024))
    conn.endheaders()
    resp = conn.getresponse()
    assert resp.status == 413
    import json

    assert json.loads(resp.read())["error"]["kind"] == "oversize"
    conn.close()


def test_malformed_multipart_rejected(server, alice):
    resp = requests.post(server.url + "/v1/recordings",
                         headers={"Authorization": f"Bearer {alice.token}",
                                  "Content-Type": "multipart/form-data; boundary=q"},
                         data=b"--q--\r\n", timeout=5)
    assert resp.status_code == 400
    # missing log part
    resp = requests.post(server.url + "/v1/recordings",
                         headers={"Authorization": f"Bearer {alice.token}"},
                         files={"meta": (None, '{"claim_id": "c"}')}, timeout=5)
    assert resp.status_code == 400
    assert resp.json()["error"]["kind"] == "schema_error"


# ------------------------------------------------------------------- events


def test_long_poll_times_out_empty(alice):
    t0 = time.monotonic()
    assert alice.poll_events(10_000, timeout_ms=300) == []
    assert time.monotonic() - t0 >= 0.28


def test_long_poll_returns_early_on_event(server, alice):
    since = server.store.latest_cursor()
    got = []

    def wait():
        got.extend(alice.poll_events(since, timeout_ms=10_000))

    thread = threading.Thread(target=wait)
    thread.start()
    time.sleep(0.15)
    t0 = time.monotonic()
    alice.publish_policy(b"mid-poll")
    thread.join(timeout=3)
    assert not thread.is_alive()
    assert time.monotonic() - t0 < 2.0
    assert [e.kind for e in got] == ["policy_published"]
    assert got[0].cursor == since + 1


def test_event_stream_gapless_from_any_cursor(alice):
    req = seeded_request(alice)
    claim = alice.claim(req.request_id)
    alice.upload_recording(claim.claim_id, valid_log_text().encode())
    full = alice.poll_events(0)
    cursors = [e.cursor for e in full]
    assert cursors == list(range(1, len(full) + 1))
    for start in range(len(full)):
        tail = alice.poll_events(start)
        assert [e.cursor for e in tail] == cursors[start:]


# --------------------------------------------------------------- contention


def test_http_concurrent_claims_exactly_one_winner(server, alice):
    req = seeded_request(alice)
    barrier = threading.Barrier(32)
    outcomes = []
    lock = threading.Lock()

    def attempt(i):
        client = FleetClient(server.url)
        client.login("alice", "alice-pw")
        barrier.wait()
        try:
            client.claim(req.request_id)
            outcome = "won"
        except Conflict:
            outcome = "conflict"
        with lock:
            outcomes.append(outcome)
        client.close()

    threads = [threading.Thread(target=attempt, args=(i,)) for i in range(32)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count("won") == 1
    assert outcomes.count("conflict") == 31


def test_shutdown_interrupts_long_polls_quickly(tmp_path):
    store = FleetStore(str(tmp_path / "d2"))
    store.create_account("alice", "pw")
    srv = FleetServer(store).start()
    client = FleetClient(srv.url)
    client.login("alice", "pw")
    results = []

    def long_wait():
        try:
            results.append(client.poll_events(0, timeout_ms=30_000))
        except Exception as exc:
            results.append(exc)

    thread = threading.Thread(target=long_wait)
    thread.start()
    time.sleep(0.2)
    t0 = time.monotonic()
    srv.stop()
    elapsed = time.monotonic() - t0
    thread.join(timeout=5)
    assert elapsed < 5.0
    assert not thread.is_alive()
