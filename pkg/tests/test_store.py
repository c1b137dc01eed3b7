"""Durable store: auth, leases, uploads, journal recovery, crash injection."""

import json
import os
import threading
import time

import pytest

from fleetnav.errors import (
    AuthExpired,
    AuthFailed,
    ClaimInvalid,
    Conflict,
    NotFound,
    PublishFailed,
    ValidationFailed,
)
from fleetnav.logs import dump_episode_log
from fleetnav.policy import ActionSpec, new_snapshot
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.protocol import DEFAULT_LEASE_MS, TaskDescriptor
from fleetnav.rollout import run_episode
from fleetnav.server import FleetStore, SimulatedCrash
from fleetnav.server.store import MAX_UPLOAD_BYTES
from fleetnav.sim import ObsSpec, SimConfig

LEASE_MS = 10_000


class FakeClock:
    def __init__(self, start=1_000_000):
        self.now = start

    def __call__(self):
        return self.now

    def advance(self, ms):
        self.now += ms


@pytest.fixture()
def clock():
    return FakeClock()


@pytest.fixture()
def store(tmp_path, clock):
    st = FleetStore(str(tmp_path / "data"), clock=clock, lease_ms=LEASE_MS)
    st.create_account("alice", "alice-pw")
    st.create_account("bob", "bob-pw")
    yield st
    st.close()


def small_sim_config():
    return SimConfig(max_steps=50, obs=ObsSpec(history=2))


_LOG_CACHE = {}


def valid_log_text(layout_seed=11, episode_seed=3):
    """One real recorded episode, cached per seed pair (uploads reuse it)."""
    key = (layout_seed, episode_seed)
    if key not in _LOG_CACHE:
        cfg = small_sim_config()
        layout = generate_layout(GenConfig(), seed=layout_seed)
        snap = new_snapshot(1, cfg.obs, ActionSpec(kind="residual"), seed=5)
        log = run_episode(layout, cfg, snap, seed=episode_seed,
                          worker_id="alice", request_id="req-x")
        _LOG_CACHE[key] = dump_episode_log(log)
    return _LOG_CACHE[key]


def publish_and_request(store, layout_seed=11, **kw):
    meta = store.publish_policy(b"policy-blob")
    req = store.create_request(TaskDescriptor(layout_seed=layout_seed),
                               policy_id=meta["policy_id"], **kw)
    return req["request_id"]


# ---------------------------------------------------------------- accounts


def test_login_roundtrip_and_wrong_password(store):
    doc = store.login("alice", "alice-pw")
    assert store.authenticate(doc["token"]) == "alice"
    with pytest.raises(AuthFailed):
        store.login("alice", "wrong")
    with pytest.raises(AuthFailed):
        store.login("nobody", "alice-pw")


def test_duplicate_account_conflicts(store):
    with pytest.raises(Conflict):
        store.create_account("alice", "other")


def test_token_expiry(store, clock):
    doc = store.login("alice", "alice-pw")
    clock.advance(store.token_ttl_ms - 1)
    assert store.authenticate(doc["token"]) == "alice"
    clock.advance(2)
    with pytest.raises(AuthExpired):
        store.authenticate(doc["token"])


def test_token_forgery_rejected(store, tmp_path, clock):
    doc = store.login("alice", "alice-pw")
    token = doc["token"]
    # Flip one signature hex digit.
    tampered = token[:-1] + ("0" if token[-1] != "0" else "1")
    with pytest.raises(AuthFailed):
        store.authenticate(tampered)
    # Claim a different identity under the same signature.
    head, sig = token.rsplit(".", 1)
    parts = head.split(".")
    parts[0] = "bob"
    with pytest.raises(AuthFailed):
        store.authenticate(".".join(parts) + "." + sig)
    # Token minted under another server's secret.
    other = FleetStore(str(tmp_path / "other"), clock=clock)
    other.create_account("alice", "alice-pw")
    foreign = other.login("alice", "alice-pw")["token"]
    other.close()
    with pytest.raises(AuthFailed):
        store.authenticate(foreign)
    with pytest.raises(AuthFailed):
        store.authenticate("not-a-token")


def test_accounts_survive_restart(tmp_path, clock):
    st = FleetStore(str(tmp_path / "d"), clock=clock)
    st.create_account("carol", "pw")
    st.close()
    st2 = FleetStore(str(tmp_path / "d"), clock=clock)
    token = st2.login("carol", "pw")["token"]
    assert st2.authenticate(token) == "carol"
    st2.close()


# ---------------------------------------------------------- request lifecycle


def test_create_request_needs_published_policy(store):
    with pytest.raises(NotFound):
        store.create_request(TaskDescriptor(layout_seed=1), policy_id=42)
    # Explicit hash bypasses the registry lookup.
    doc = store.create_request(TaskDescriptor(layout_seed=1), policy_id=42,
                               policy_hash="cafe" * 16)
    assert doc["state"] == "open" and doc["policy_hash"] == "cafe" * 16


def test_claim_then_complete_removes_from_listing(store, clock):
    rid = publish_and_request(store)
    assert [r["request_id"] for r in store.list_requests()] == [rid]
    claim = store.claim_request("alice", rid)
    assert claim["expires_at"] == clock() + LEASE_MS
    listed = store.list_requests()
    assert listed[0]["state"] == "claimed"
    with pytest.raises(Conflict):
        store.claim_request("bob", rid)
    store.upload_recording("alice", claim["claim_id"], valid_log_text())
    assert store.list_requests() == []
    with pytest.raises(NotFound):
        store.claim_request("bob", rid)  # completed requests are deleted


def test_lease_expiry_reopens_and_emits_event(store, clock):
    rid = publish_and_request(store)
    store.claim_request("alice", rid)
    clock.advance(LEASE_MS + 1)
    listed = store.list_requests()
    assert listed[0]["state"] == "open" and listed[0]["claim"] is None
    reopened = [e for e in store.poll_events(0) if e.kind == "request_reopened"]
    assert len(reopened) == 1 and reopened[0].payload["cause"] == "expired"
    # Another worker can now claim it.
    claim = store.claim_request("bob", rid)
    assert claim["worker_id"] == "bob"


def test_cancel_reopens_for_others(store):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    with pytest.raises(ClaimInvalid):
        store.cancel_claim("bob", rid, claim["claim_id"])
    doc = store.cancel_claim("alice", rid, claim["claim_id"])
    assert doc["state"] == "open"
    assert store.claim_request("bob", rid)["worker_id"] == "bob"


def test_renew_extends_holder_only(store, clock):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    clock.advance(LEASE_MS // 2)
    renewed = store.renew_claim("alice", rid, claim["claim_id"])
    assert renewed["expires_at"] == clock() + LEASE_MS
    with pytest.raises(Conflict):
        store.renew_claim("bob", rid, claim["claim_id"])
    with pytest.raises(Conflict):
        store.renew_claim("alice", rid, "clm-other")


def test_permitted_workers_enforced(store):
    from fleetnav.errors import NotPermitted

    rid = publish_and_request(store, permitted_workers=("bob",))
    with pytest.raises(NotPermitted):
        store.claim_request("alice", rid)
    assert store.claim_request("bob", rid)["worker_id"] == "bob"
    # Listing for alice hides it; bob sees it.
    assert store.list_requests("alice") == []
    assert len(store.list_requests("bob")) == 1


# -------------------------------------------------------------------- uploads


def test_upload_validates_log(store):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    with pytest.raises(ValidationFailed):
        store.upload_recording("alice", claim["claim_id"], b"not a log")
    with pytest.raises(ValidationFailed) as err:
        store.upload_recording("alice", claim["claim_id"],
                               b"\xff\xfe garbage bytes")
    assert err.value.violations
    # Request is still claimed after failed validation; a good log goes in.
    rec = store.upload_recording("alice", claim["claim_id"], valid_log_text())
    assert store.get_recording(rec)[0] == valid_log_text().encode()


def test_upload_rejects_short_start_goal_distance(store):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    lines = valid_log_text().splitlines()
    header = json.loads(lines[0])
    header["goal"] = [header["start_pose"][0] + 1.5, header["start_pose"][1]]
    header["start_goal_distance"] = 1.5
    doctored = "\n".join([json.dumps(header)] + lines[1:]) + "\n"
    with pytest.raises(ValidationFailed) as err:
        store.upload_recording("alice", claim["claim_id"], doctored)
    assert any("2" in v for v in err.value.violations)


def test_upload_size_cap(store):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    with pytest.raises(ValidationFailed) as err:
        store.upload_recording("alice", claim["claim_id"],
                               b"x" * (MAX_UPLOAD_BYTES + 1))
    assert "bytes" in str(err.value)


def test_upload_requires_live_claim(store, clock):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    with pytest.raises(ClaimInvalid):
        store.upload_recording("bob", claim["claim_id"], valid_log_text())
    with pytest.raises(ClaimInvalid):
        store.upload_recording("alice", "clm-nope", valid_log_text())
    clock.advance(LEASE_MS + 1)
    with pytest.raises(ClaimInvalid):
        store.upload_recording("alice", claim["claim_id"], valid_log_text())


def test_upload_idempotent_by_claim(store):
    rid = publish_and_request(store)
    claim = store.claim_request("alice", rid)
    first = store.upload_recording("alice", claim["claim_id"], valid_log_text())
    again = store.upload_recording("alice", claim["claim_id"], valid_log_text())
    assert first == again
    assert len(store.list_recordings()) == 1
    with pytest.raises(ClaimInvalid):
        store.upload_recording("bob", claim["claim_id"], valid_log_text())


# ------------------------------------------------------------------- policies


def test_policy_monotone_ids_and_latest(store):
    first = store.publish_policy(b"one")
    second = store.publish_policy(b"two")
    assert second["policy_id"] == first["policy_id"] + 1
    blob, meta = store.get_policy("latest")
    assert blob == b"two" and meta["policy_id"] == second["policy_id"]
    blob, _ = store.get_policy(first["policy_id"])
    assert blob == b"one"
    with pytest.raises(NotFound):
        store.get_policy(99)
    with pytest.raises(NotFound):
        store.get_policy("banana")


def test_policy_stated_hash_checked(store):
    import hashlib

    with pytest.raises(PublishFailed):
        store.publish_policy(b"blob", content_hash="0" * 64)
    meta = store.publish_policy(
        b"blob", content_hash=hashlib.sha256(b"blob").hexdigest())
    got, meta2 = store.get_policy(meta["policy_id"])
    assert hashlib.sha256(got).hexdigest() == meta2["content_hash"]


# ------------------------------------------------------------ events + stats


def test_event_cursors_dense_from_one(store):
    publish_and_request(store)
    rid2 = publish_and_request(store, layout_seed=12)
    store.claim_request("alice", rid2)
    events = store.poll_events(0)
    assert [e.cursor for e in events] == list(range(1, len(events) + 1))
    # since= slices without gaps or repeats
    tail = store.poll_events(2)
    assert [e.cursor for e in tail] == list(range(3, len(events) + 1))


def test_poll_timeout_returns_empty(store):
    latest = store.latest_cursor()
    t0 = time.monotonic()
    assert store.poll_events(latest, timeout_ms=200) == []
    assert time.monotonic() - t0 >= 0.19


def test_poll_wakes_on_new_event(store):
    latest = store.latest_cursor()
    got = []

    def wait():
        got.extend(store.poll_events(latest, timeout_ms=5_000))

    thread = threading.Thread(target=wait)
    thread.start()
    time.sleep(0.1)
    store.publish_policy(b"wake")
    thread.join(timeout=2)
    assert not thread.is_alive()
    assert [e.kind for e in got] == ["policy_published"]


def test_worker_stats_aggregation(store):
    # Three uploads of 10 s, 20 s, 30 s by alice; bob stays at zero.
    meta = store.publish_policy(b"p")
    for duration in (10.0, 20.0, 30.0):
        req = store.create_request(TaskDescriptor(layout_seed=11),
                                   policy_id=meta["policy_id"])
        claim = store.claim_request("alice", req["request_id"])
        lines = valid_log_text().splitlines()
        footer = json.loads(lines[-1])
        footer["duration_s"] = duration
        text = "\n".join(lines[:-1] + [json.dumps(footer)]) + "\n"
        store.upload_recording("alice", claim["claim_id"], text)
    stats = {row["worker_id"]: row for row in store.worker_stats()}
    assert stats["alice"]["recording_count"] == 3
    assert stats["alice"]["total_recorded_duration_s"] == pytest.approx(60.0)
    assert stats["bob"]["recording_count"] == 0
    assert stats["bob"]["total_recorded_duration_s"] == 0.0


# ------------------------------------------------------- recovery + durability


def test_restart_reproduces_state(tmp_path, clock):
    path = str(tmp_path / "d")
    st = FleetStore(path, clock=clock, lease_ms=LEASE_MS)
    st.create_account("alice", "pw")
    meta = st.publish_policy(b"pol")
    keep = st.create_request(TaskDescriptor(layout_seed=11),
                             policy_id=meta["policy_id"])
    done = st.create_request(TaskDescriptor(layout_seed=11),
                             policy_id=meta["policy_id"])
    claim = st.claim_request("alice", done["request_id"])
    rec = st.upload_recording("alice", claim["claim_id"], valid_log_text())
    held = st.claim_request("alice", keep["request_id"])
    before_requests = st.list_requests()
    before_stats = st.worker_stats()
    before_events = [(e.cursor, e.kind) for e in st.poll_events(0)]
    st.close()

    st2 = FleetStore(path, clock=clock, lease_ms=LEASE_MS)
    assert st2.list_requests() == before_requests
    assert st2.worker_stats() == before_stats
    assert [(e.cursor, e.kind) for e in st2.poll_events(0)] == before_events
    assert st2.get_recording(rec)[0] == valid_log_text().encode()
    assert st2.get_policy("latest")[0] == b"pol"
    # The live claim survives the restart.
    with pytest.raises(Conflict):
        st2.claim_request("bob-imposter", keep["request_id"])
    renewed = st2.renew_claim("alice", keep["request_id"], held["claim_id"])
    assert renewed["claim_id"] == held["claim_id"]
    st2.close()


def test_torn_journal_tail_truncated(tmp_path, clock):
    path = str(tmp_path / "d")
    st = FleetStore(path, clock=clock)
    st.create_account("alice", "pw")
    st.publish_policy(b"pol")
    good_events = [(e.cursor, e.kind) for e in st.poll_events(0)]
    st.close()

    journal = os.path.join(path, "journal.jsonl")
    good_size = os.path.getsize(journal)
    with open(journal, "ab") as f:
        f.write(b'{"cursor": 2, "kind": "request_cr')  # torn mid-line

    st2 = FleetStore(path, clock=clock)
    assert [(e.cursor, e.kind) for e in st2.poll_events(0)] == good_events
    assert os.path.getsize(journal) == good_size
    # The store keeps working and reuses the freed cursor.
    st2.publish_policy(b"pol2")
    assert st2.latest_cursor() == len(good_events) + 1
    st2.close()

    # Torn line that happens to end with a newline is also dropped.
    with open(journal, "ab") as f:
        f.write(b'{"cursor": broken json}\n')
    st3 = FleetStore(path, clock=clock)
    assert st3.latest_cursor() == len(good_events) + 1
    st3.close()


def _consistent_after_crash(path, clock):
    """Reopen the store and check the crash-safety invariants."""
    st = FleetStore(path, clock=clock, lease_ms=LEASE_MS)
    events = st.poll_events(0, limit=100_000)
    completed = {e.payload["request_id"]: e.payload["recording_id"]
                 for e in events if e.kind == "request_completed"}
    uploaded = {e.payload["recording_id"]: e.payload
                for e in events if e.kind == "recording_uploaded"}
    # Every completed request has its recording, bytes intact.
    for request_id, recording_id in completed.items():
        assert recording_id in uploaded
        blob, meta = st.get_recording(recording_id)
        import hashlib

        assert hashlib.sha256(blob).hexdigest() == meta["sha256"]
    # No half-stored recordings: every non-temp object file is complete and
    # parseable (orphans from a crash before journaling are allowed, torn
    # files are not).
    from fleetnav.logs import parse_episode_log

    obj_dir = os.path.join(path, "objects", "recordings")
    for name in os.listdir(obj_dir):
        if ".tmp-" in name:
            continue
        with open(os.path.join(obj_dir, name), "rb") as f:
            parse_episode_log(f.read().decode("utf-8"))
    return st


def test_crash_injection_storm_keeps_store_consistent(tmp_path, clock):
    """Kill-and-restart at every durability boundary, 50 times over."""
    from fleetnav.server.store import FAULT_POINTS

    path = str(tmp_path / "d")
    st = FleetStore(path, clock=clock, lease_ms=LEASE_MS)
    st.create_account("alice", "pw")
    policy = st.publish_policy(b"pol")["policy_id"]
    log_text = valid_log_text()

    crashes = 0
    uploads_acknowledged = 0
    attempt = 0
    while crashes < 50:
        point = FAULT_POINTS[attempt % len(FAULT_POINTS)]
        # Also vary whether the first or second fault-point hit trips.
        trip_at = (attempt // len(FAULT_POINTS)) % 2
        attempt += 1

        req = st.create_request(TaskDescriptor(layout_seed=11), policy_id=policy)
        claim = st.claim_request("alice", req["request_id"])

        hits = [0]

        def fault(name, point=point, trip_at=trip_at, hits=hits):
            if name == point:
                if hits[0] == trip_at:
                    hits[0] += 1
                    raise SimulatedCrash(name)
                hits[0] += 1

        st.fault = fault
        try:
            st.upload_recording("alice", claim["claim_id"], log_text)
            uploads_acknowledged += 1
        except SimulatedCrash:
            crashes += 1
            st.fault = None
            st.close()
            clock.advance(LEASE_MS + 1)  # let any surviving lease lapse
            st = _consistent_after_crash(path, clock)
        else:
            st.fault = None

    # Finish every survivor without faults: the store must still make progress.
    for req in st.list_requests():
        claim = st.claim_request("alice", req["request_id"])
        st.upload_recording("alice", claim["claim_id"], log_text)
    assert st.list_requests() == []
    events = st.poll_events(0, limit=100_000)
    kinds = [e.kind for e in events]
    assert kinds.count("request_created") == kinds.count("request_completed")
    assert crashes == 50
    st.close()


# ----------------------------------------------------------- claim contention


def claim_storm(store, request_id, workers):
    """Fire one claim per worker through a barrier; count outcomes."""
    barrier = threading.Barrier(len(workers))
    results = []
    lock = threading.Lock()

    def attempt(worker_id):
        barrier.wait()
        try:
            store.claim_request(worker_id, request_id)
            outcome = "won"
        except Conflict:
            outcome = "conflict"
        except NotFound:
            outcome = "not_found"
        with lock:
            results.append(outcome)

    threads = [threading.Thread(target=attempt, args=(w,)) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


def test_concurrent_claims_exactly_one_winner(store):
    meta = store.publish_policy(b"pol")
    workers = [f"w{i}" for i in range(32)]
    for round_idx in range(100):
        req = store.create_request(TaskDescriptor(layout_seed=11),
                                   policy_id=meta["policy_id"])
        results = claim_storm(store, req["request_id"], workers)
        assert results.count("won") == 1, f"round {round_idx}: {results}"
        assert results.count("conflict") == 31
