"""Headless fleet worker: claim a request, run the episode, upload the log.

The loop mirrors what a phone operator would do by hand: watch for open
requests, take one, fetch the exact policy it names (hash-checked), run the
episode in the simulator seeded from the request, and upload the recording.
Transient transport failures back off exponentially (base 1 s, cap 60 s);
credential rejection is fatal. A worker that dies mid-episode simply lets
its lease lapse, so no request is ever blocked for more than one lease.
"""

from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .client import FleetClient
from .errors import (
    AuthExpired,
    AuthFailed,
    ClaimInvalid,
    Conflict,
    FatalAuth,
    FleetNavError,
    HashMismatch,
    InvalidArgument,
    MismatchAt,
    NotFound,
    SpecMismatch,
)
from .logs import EpisodeLog, dump_episode_log, validate_episode_log
from .policy import PolicySnapshot, deserialize_snapshot
from .procgen import GenConfig, LayoutSpec, generate_layout
from .protocol import Claim, RecordingRequest
from .rng import stream
from .rollout import run_episode
from .sim import SimConfig, WheelCommand, reset, step

POSE_REPLAY_TOLERANCE = 1e-9


@dataclass
class WorkerConfig:
    server: str
    username: str
    password: str
    sim_config: SimConfig = field(default_factory=SimConfig)
    gen_config: GenConfig = field(default_factory=GenConfig)
    slots: int = 1
    poll_interval_s: float = 2.0
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 60.0
    once: bool = False
    seed: int = None  # episode seed source; None draws from the OS

    def __post_init__(self):
        if self.slots < 1:
            raise InvalidArgument("slots must be >= 1")


def replay_check(log: EpisodeLog, layout: LayoutSpec, config: SimConfig) -> None:
    """Re-simulate the logged actions; raise MismatchAt on pose divergence.

    Noise is seeded by the episode seed, so logs from noisy sims replay
    exactly too, as long as layout and config match the recording.
    """
    state, _ = reset(layout, config, log.episode_seed)
    for i, rec in enumerate(log.steps):
        if state.ended:
            raise MismatchAt(i, "simulation ended before the log did")
        state, _, _ = step(state, WheelCommand(*rec.action))
        sim_pose = np.array([state.pose_est.x, state.pose_est.y, state.pose_est.theta])
        err = float(np.max(np.abs(sim_pose - np.asarray(rec.pose_est))))
        if err > POSE_REPLAY_TOLERANCE:
            raise MismatchAt(i, f"pose_est off by {err:.3e}")
        if rec.pose_true is not None:
            true_pose = np.array([state.pose_true.x, state.pose_true.y,
                                  state.pose_true.theta])
            err = float(np.max(np.abs(true_pose - np.asarray(rec.pose_true))))
            if err > POSE_REPLAY_TOLERANCE:
                raise MismatchAt(i, f"pose_true off by {err:.3e}")


def acceptable_log(log_text) -> list:
    """Worker-side preflight, same checks the server runs on upload."""
    from .logs import parse_episode_log

    try:
        log = parse_episode_log(log_text)
    except FleetNavError as exc:
        return [f"unparseable episode log: {exc}"]
    return validate_episode_log(log)


class Worker:
    """One fleet client running `slots` sequential collect loops."""

    def __init__(self, config: WorkerConfig, client: FleetClient = None,
                 log_fn=None, clock=None):
        self.config = config
        self.client = client or FleetClient(config.server)
        self.log = log_fn or (lambda level, msg, **kw: None)
        self.clock = clock or (lambda: int(time.time() * 1000))
        self._stop = threading.Event()
        self._policies: dict[int, PolicySnapshot] = {}
        seed = config.seed
        if seed is None:
            seed = int.from_bytes(os.urandom(8), "big") >> 2
        self._rng = stream(seed, "worker", config.username)
        self._cursor = 0
        self.reports: list[dict] = []

    # ------------------------------------------------------------ lifecycle

    def stop(self) -> None:
        self._stop.set()

    def run(self) -> int:
        """Blocking main loop. Returns 0 on clean shutdown, raises FatalAuth."""
        try:
            self.client.login(self.config.username, self.config.password)
        except AuthFailed as exc:
            raise FatalAuth(f"login rejected: {exc}") from exc
        if self.config.slots == 1:
            self._slot_loop(0)
            return 0
        threads = [
            threading.Thread(target=self._slot_loop, args=(i,),
                             name=f"worker-slot-{i}", daemon=True)
            for i in range(self.config.slots)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return 0

    def _slot_loop(self, slot: int) -> None:
        backoff = self.config.backoff_base_s
        while not self._stop.is_set():
            try:
                report = self.run_cycle()
                backoff = self.config.backoff_base_s
            except (requests.RequestException, AuthExpired) as exc:
                if isinstance(exc, AuthExpired):
                    try:
                        self.client.login(self.config.username,
                                          self.config.password)
                    except AuthFailed as auth_exc:
                        raise FatalAuth(str(auth_exc)) from auth_exc
                self.log("warning", f"transient failure, backing off {backoff:.0f}s",
                         error=str(exc), slot=slot)
                self._sleep(backoff)
                backoff = min(backoff * 2, self.config.backoff_cap_s)
                continue
            self.reports.append(report)
            if self.config.once:
                return
            if report["status"] == "idle":
                self._wait_for_work()

    def _sleep(self, seconds: float) -> None:
        self._stop.wait(seconds)

    def _wait_for_work(self) -> None:
        # Long-poll the event feed so a new request wakes us immediately;
        # fall back to the poll interval on any hiccup.
        try:
            events = self.client.poll_events(
                self._cursor, timeout_ms=int(self.config.poll_interval_s * 1000))
            if events:
                self._cursor = events[-1].cursor
        except (requests.RequestException, FleetNavError):
            self._sleep(self.config.poll_interval_s)

    # ----------------------------------------------------------- one cycle

    def run_cycle(self) -> dict:
        """Poll, claim, record, upload. Returns a cycle report."""
        claimed = self._claim_next()
        if claimed is None:
            return {"status": "idle"}
        request, claim = claimed
        try:
            snapshot = self._fetch_policy(request)
        except (HashMismatch, SpecMismatch, NotFound) as exc:
            # Do not run an episode with a policy that cannot be verified.
            self.log("warning", "policy fetch failed, cancelling claim",
                     error=str(exc), request_id=request.request_id)
            self._try_cancel(request, claim)
            return {"status": "policy_unavailable", "request_id": request.request_id}

        layout = generate_layout(self.config.gen_config,
                                 seed=request.task.layout_seed)
        episode_seed = int(self._rng.integers(2 ** 62))
        log = run_episode(layout, self.config.sim_config, snapshot,
                          seed=episode_seed, stochastic=True,
                          worker_id=self.client.worker_id,
                          request_id=request.request_id)
        text = dump_episode_log(log)

        violations = acceptable_log(text)
        if violations:
            self.log("warning", "recorded episode failed local validation",
                     violations=violations, request_id=request.request_id)
            self._try_cancel(request, claim)
            return {"status": "invalid_recording",
                    "request_id": request.request_id,
                    "violations": violations}

        return self._upload_with_retry(request, claim, log, text)

    def _claim_next(self):
        requests_list = self.client.list_requests()
        now = self.clock()
        for request in requests_list:
            if request.state == "open" or not request.claim_active(now):
                try:
                    claim = self.client.claim(request.request_id)
                    return request, claim
                except (Conflict, NotFound):
                    continue  # lost the race; try the next one
        return None

    def _fetch_policy(self, request: RecordingRequest) -> PolicySnapshot:
        cached = self._policies.get(request.policy_id)
        if cached is not None:
            return cached
        last_error = None
        for attempt in range(3):
            blob, policy_id, advertised = self.client.get_policy(request.policy_id)
            digest = hashlib.sha256(blob).hexdigest()
            if digest != advertised or (request.policy_hash
                                        and digest != request.policy_hash):
                last_error = HashMismatch(
                    f"policy {request.policy_id} bytes hash {digest[:12]}..., "
                    f"expected {request.policy_hash[:12]}...")
                self.log("warning", "policy hash mismatch, refetching",
                         attempt=attempt)
                continue
            snapshot = deserialize_snapshot(blob)
            self._policies[request.policy_id] = snapshot
            return snapshot
        raise last_error

    def _try_cancel(self, request: RecordingRequest, claim: Claim) -> None:
        try:
            self.client.cancel(request.request_id, claim.claim_id)
        except (requests.RequestException, FleetNavError):
            pass  # lease expiry will reopen it

    def _upload_with_retry(self, request: RecordingRequest, claim: Claim,
                           log: EpisodeLog, text: str) -> dict:
        """Retry transient upload failures until the lease runs out."""
        data = text.encode("utf-8")
        backoff = self.config.backoff_base_s
        while True:
            try:
                recording_id = self.client.upload_recording(claim.claim_id, data)
                self.log("info", "recording uploaded",
                         recording_id=recording_id,
                         request_id=request.request_id,
                         steps=len(log.steps), stop_reason=log.stop_reason)
                return {"status": "uploaded", "recording_id": recording_id,
                        "request_id": request.request_id,
                        "steps": len(log.steps), "stop_reason": log.stop_reason}
            except ClaimInvalid as exc:
                self.log("warning", "claim no longer valid, discarding recording",
                         error=str(exc), request_id=request.request_id)
                return {"status": "discarded", "request_id": request.request_id}
            except requests.RequestException as exc:
                if self.clock() >= claim.expires_at or self._stop.is_set():
                    self.log("warning",
                             "lease expired before upload succeeded, "
                             "discarding recording",
                             error=str(exc), request_id=request.request_id)
                    return {"status": "discarded",
                            "request_id": request.request_id}
                self._sleep(backoff)
                backoff = min(backoff * 2, self.config.backoff_cap_s)
