"""Learner-service behavior against a scripted in-memory client: publish
retry with lost-response recovery, request top-up capping, the success-window
stop rule, and the post-stop drain that guarantees no journaled upload is
dropped."""

import dataclasses

import pytest
import requests

from fleetnav.learner import LearnerService, OnlineConfig, SacConfig, SacLearner
from fleetnav.logs import dump_episode_log
from fleetnav.policy import deserialize_snapshot
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.protocol import FleetEvent, TaskDescriptor
from fleetnav.rollout import run_episode
from fleetnav.sim import SimConfig


SIM = SimConfig()


@dataclasses.dataclass
class FakeRequest:
    request_id: str


class ScriptedClient:
    """Minimal stand-in for FleetClient. Recordings are queued by tests and
    surfaced as journal events one poll at a time."""

    def __init__(self):
        self.policies = []          # (policy_id, blob, content_hash)
        self.fail_next_publishes = 0
        self.lose_response_next = False   # publish lands but the reply is lost
        self.requests_created = []
        self.recordings = {}
        self.pending = []           # recording ids not yet surfaced
        self.cursor = 0
        self.publish_calls = 0
        self.on_stop_enqueued = []

    # -- policy -----------------------------------------------------------
    def publish_policy(self, blob, content_hash=None):
        self.publish_calls += 1
        if self.lose_response_next:
            self.lose_response_next = False
            self.policies.append((len(self.policies) + 1, blob, content_hash))
            raise requests.ConnectionError("response lost after commit")
        if self.fail_next_publishes > 0:
            self.fail_next_publishes -= 1
            raise requests.ConnectionError("transport down")
        self.policies.append((len(self.policies) + 1, blob, content_hash))
        return {"policy_id": len(self.policies)}

    def get_policy(self, selector):
        if not self.policies:
            from fleetnav.errors import NotFound
            raise NotFound("no policy yet")
        pid, blob, digest = self.policies[-1]
        return blob, pid, digest

    # -- requests and recordings ------------------------------------------
    def create_request(self, task: TaskDescriptor, policy_id=None):
        rid = f"req-{len(self.requests_created)}"
        self.requests_created.append((rid, task.layout_seed, policy_id))
        return FakeRequest(request_id=rid)

    def get_recording(self, recording_id):
        return self.recordings[recording_id]

    def poll_events(self, cursor, timeout_ms=0):
        events = []
        while self.pending:   # the journal hands over everything it has
            rec_id = self.pending.pop(0)
            self.cursor += 1
            events.append(FleetEvent(cursor=self.cursor,
                                     kind="recording_uploaded",
                                     payload={"recording_id": rec_id},
                                     timestamp_ms=0))
        return events

    # -- test scripting -----------------------------------------------------
    def enqueue_episode(self, log_text, rec_id):
        self.recordings[rec_id] = log_text.encode("utf-8")
        self.pending.append(rec_id)


def make_log_text(seed=0, success_hint=True):
    gen = GenConfig(room_count_range=(1, 1), room_size_range=(4.0, 5.0),
                    obstacle_count_range=(0, 0))
    layout = generate_layout(gen, 3000 + seed)
    from fleetnav.evaluation import unicycle_snapshot
    snap = unicycle_snapshot(SIM.obs)
    log = run_episode(layout, SIM, snap, seed=seed, worker_id="t",
                      stochastic=False)
    return dump_episode_log(log), log.stop_reason


def make_service(client, cfg):
    learner = SacLearner(SIM.obs.input_width,
                         cfg=SacConfig(hidden=(16, 16), warmup_steps=10_000),
                         seed=0)
    return LearnerService(client, learner, SIM.obs, layout_seeds=[7, 9],
                          cfg=cfg)


def test_layout_seeds_required():
    from fleetnav.errors import InvalidArgument
    learner = SacLearner(SIM.obs.input_width, cfg=SacConfig(hidden=(8, 8)))
    with pytest.raises(InvalidArgument):
        LearnerService(ScriptedClient(), learner, SIM.obs, layout_seeds=[])


def test_run_ingests_and_counts(monkeypatch):
    client = ScriptedClient()
    text, reason = make_log_text(seed=1)
    for i in range(3):
        client.enqueue_episode(text, f"rec-{i}")
    cfg = OnlineConfig(max_episodes=3, publish_every=2, open_target=8,
                       poll_timeout_ms=1)
    service = make_service(client, cfg)
    result = service.run()
    assert result.episodes == 3
    assert result.ingested == ["rec-0", "rec-1", "rec-2"]
    assert result.successes == [reason == "goal_reached"] * 3
    assert service.buffer.size == result.env_steps
    # initial publish, one mid-run (episode 2), final one after the drain
    assert len(result.publishes) == 3
    assert result.stop_reason == "budget"


def test_top_up_capped_by_remaining_episodes():
    client = ScriptedClient()
    text, _ = make_log_text(seed=2)
    for i in range(3):
        client.enqueue_episode(text, f"rec-{i}")
    cfg = OnlineConfig(max_episodes=3, publish_every=50, open_target=10,
                       poll_timeout_ms=1)
    service = make_service(client, cfg)
    service.run()
    # never more open requests than episodes still owed
    assert len(client.requests_created) <= 3
    # seeds cycle through the configured pool
    seeds = [s for (_, s, _) in client.requests_created]
    assert seeds == [7, 9, 7][:len(seeds)]


def test_publish_lost_response_recovered_by_hash(monkeypatch):
    client = ScriptedClient()
    client.lose_response_next = True   # initial publish reply is dropped
    text, _ = make_log_text(seed=3)
    client.enqueue_episode(text, "rec-0")
    cfg = OnlineConfig(max_episodes=1, publish_every=50, open_target=1,
                       poll_timeout_ms=1, publish_backoff_s=0.01)
    service = make_service(client, cfg)
    result = service.run()
    # the blob landed exactly once despite the lost reply: no duplicate push
    assert [pid for pid, _, _ in client.policies][0] == 1
    assert result.publishes[0] == 1
    assert len(client.policies) == 2   # initial + final, not three


def test_publish_true_failure_retries(monkeypatch):
    client = ScriptedClient()
    client.fail_next_publishes = 2    # down, and nothing landed
    text, _ = make_log_text(seed=4)
    client.enqueue_episode(text, "rec-0")
    cfg = OnlineConfig(max_episodes=1, publish_every=50, open_target=1,
                       poll_timeout_ms=1, publish_backoff_s=0.01)
    service = make_service(client, cfg)
    result = service.run()
    assert result.publishes[0] == 1
    assert client.publish_calls >= 3   # two failures then success


def test_publish_gives_up_after_retry_budget():
    client = ScriptedClient()
    client.fail_next_publishes = 99
    cfg = OnlineConfig(max_episodes=1, publish_retries=2,
                       publish_backoff_s=0.01, poll_timeout_ms=1)
    service = make_service(client, cfg)
    with pytest.raises(requests.RequestException):
        service.run()


def test_success_window_stops_early():
    client = ScriptedClient()
    text, reason = make_log_text(seed=5)
    assert reason == "goal_reached"   # straight line in an empty room
    for i in range(4):
        client.enqueue_episode(text, f"rec-{i}")
    cfg = OnlineConfig(max_episodes=50, publish_every=100, open_target=2,
                       success_window=4, poll_timeout_ms=1)
    service = make_service(client, cfg)
    result = service.run()
    assert result.episodes == 4
    assert result.stop_reason == "solved"


def test_drain_ingests_uploads_journaled_after_target():
    client = ScriptedClient()
    text, _ = make_log_text(seed=6)
    for i in range(2):
        client.enqueue_episode(text, f"rec-{i}")

    stopped = {"flag": False}

    def stop_workers():
        stopped["flag"] = True
        # a worker finished an episode just before stopping; it is journaled
        client.enqueue_episode(text, "rec-late")

    cfg = OnlineConfig(max_episodes=2, publish_every=50, open_target=2,
                       poll_timeout_ms=1)
    service = make_service(client, cfg)
    result = service.run(stop_workers=stop_workers)
    assert stopped["flag"]
    assert "rec-late" in result.ingested      # nothing journaled is dropped
    assert result.episodes == 3
    assert service.buffer.size == result.env_steps


def test_final_publish_reflects_drained_data():
    client = ScriptedClient()
    text, _ = make_log_text(seed=7)
    client.enqueue_episode(text, "rec-0")
    cfg = OnlineConfig(max_episodes=1, publish_every=50, open_target=1,
                       poll_timeout_ms=1)
    service = make_service(client, cfg)
    result = service.run()
    # last journaled policy deserializes and matches the learner's actor now
    pid, blob, digest = client.policies[-1]
    snap = deserialize_snapshot(blob)
    assert snap.content_hash == digest
    assert pid == result.publishes[-1]
