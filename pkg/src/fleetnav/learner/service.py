"""Online learner service: the server-side half of the fleet training loop.

The service publishes the current policy, keeps a pool of recording requests
open against it, and follows the event feed. Every uploaded recording is
fetched, reward-labeled, pushed into the replay buffer, and paid for with
G gradient steps per environment step; every `publish_every` ingested
episodes the improved policy is republished and newer requests point at it.

Ingestion is cursor-driven off the journal, so recordings are never missed
or double-counted: the buffer ends up holding exactly the transitions of
the uploaded episodes, no matter how workers interleave.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import requests as _requests

from ..errors import InvalidArgument, NotFound
from ..logs import parse_episode_log
from ..policy import serialize_snapshot
from ..protocol import TaskDescriptor
from ..sim import ObsSpec
from .driver import _train_on_episode, finetune_should_stop
from .replay import ReplayBuffer
from .rewards import RewardConfig, assign_rewards
from .sac import SacLearner


@dataclass(frozen=True)
class OnlineConfig:
    max_episodes: int = 200  # ingested episodes before the loop winds down
    publish_every: int = 50  # ingested episodes between republishes
    open_target: int = 8  # open+claimed requests kept outstanding
    poll_timeout_ms: int = 2000
    success_window: int = 0  # >0: also stop on this many consecutive successes
    description: str = "fleet training episode"
    publish_retries: int = 5
    publish_backoff_s: float = 0.5

    def __post_init__(self):
        if self.max_episodes < 1:
            raise InvalidArgument("max_episodes must be >= 1")
        if self.publish_every < 1:
            raise InvalidArgument("publish_every must be >= 1")
        if self.open_target < 1:
            raise InvalidArgument("open_target must be >= 1")


@dataclass
class OnlineResult:
    episodes: int = 0
    env_steps: int = 0
    updates: int = 0
    publishes: list = field(default_factory=list)  # server policy ids
    successes: list = field(default_factory=list)
    ingested: list = field(default_factory=list)  # recording ids, feed order
    stop_reason: str = "budget"


class LearnerService:
    """Single learner process driving one fleet server.

    The caller owns the workers; `run(stop_workers=...)` calls that hook once
    the episode target is met, then drains every upload the stopped workers
    already journaled before returning.
    """

    def __init__(self, client, learner: SacLearner, obs_spec: ObsSpec,
                 layout_seeds, cfg: OnlineConfig = None,
                 buffer: ReplayBuffer = None, reward_cfg: RewardConfig = None,
                 log_fn=None):
        self.client = client
        self.learner = learner
        self.obs_spec = obs_spec
        self.layout_seeds = list(layout_seeds)
        if not self.layout_seeds:
            raise InvalidArgument("no layout seeds to request work on")
        self.cfg = cfg or OnlineConfig()
        self.buffer = buffer or ReplayBuffer(obs_spec.input_width)
        self.reward_cfg = reward_cfg or RewardConfig()
        self.log = log_fn or (lambda **kw: None)
        self._cursor = 0
        self._next_seed = 0
        self._open_requests = set()
        self._policy_id = None
        self._stopping = False

    # ------------------------------------------------------------- publish

    def _publish(self, result: OnlineResult) -> None:
        """Push the current actor; on transport failure check whether the
        bytes already landed (same content hash) before retrying."""
        snap = self.learner.snapshot((self._policy_id or 0) + 1, self.obs_spec)
        blob = serialize_snapshot(snap)  # also fills snap.content_hash
        digest = snap.content_hash
        delay = self.cfg.publish_backoff_s
        for attempt in range(self.cfg.publish_retries):
            try:
                meta = self.client.publish_policy(blob, content_hash=digest)
                self._policy_id = int(meta["policy_id"])
                result.publishes.append(self._policy_id)
                self.log(event="policy_published", policy_id=self._policy_id,
                         content_hash=digest)
                return
            except _requests.RequestException:
                try:
                    _, latest_id, latest_hash = self.client.get_policy("latest")
                    if latest_hash == digest:  # the lost response had landed
                        self._policy_id = latest_id
                        result.publishes.append(latest_id)
                        return
                except (NotFound, _requests.RequestException):
                    pass
                if attempt + 1 == self.cfg.publish_retries:
                    raise
                time.sleep(delay)
                delay = min(delay * 2, 10.0)

    def _top_up_requests(self, result: OnlineResult) -> None:
        if self._stopping:
            return
        remaining = self.cfg.max_episodes - result.episodes
        want = min(self.cfg.open_target, max(remaining, 0))
        while len(self._open_requests) < want:
            seed = self.layout_seeds[self._next_seed % len(self.layout_seeds)]
            self._next_seed += 1
            task = TaskDescriptor(layout_seed=seed, episode_count=1,
                                  description=self.cfg.description)
            req = self.client.create_request(task, policy_id=self._policy_id)
            self._open_requests.add(req.request_id)

    # ------------------------------------------------------------ ingest

    def _ingest(self, event, result: OnlineResult) -> None:
        recording_id = event.payload["recording_id"]
        log = parse_episode_log(self.client.get_recording(recording_id).decode("utf-8"))
        traj = assign_rewards(log, self.reward_cfg)
        self.buffer.push(traj)
        n = len(log.steps)
        updates, diag = _train_on_episode(self.learner, self.buffer, n)
        result.episodes += 1
        result.env_steps += n
        result.updates += updates
        result.successes.append(log.stop_reason == "goal_reached")
        result.ingested.append(recording_id)
        self.log(event="ingested", recording_id=recording_id,
                 episodes=result.episodes, steps=n,
                 stop_reason=log.stop_reason, updates=result.updates,
                 **{k: round(float(v), 5) for k, v in diag.items()})

    def _handle(self, events, result: OnlineResult) -> None:
        for ev in events:
            self._cursor = max(self._cursor, ev.cursor)
            if ev.kind == "recording_uploaded":
                self._ingest(ev, result)
                if (result.episodes % self.cfg.publish_every == 0
                        and not self._stopping):
                    self._publish(result)
            elif ev.kind == "request_completed":
                self._open_requests.discard(ev.payload["request_id"])

    def _target_met(self, result: OnlineResult) -> bool:
        if result.episodes >= self.cfg.max_episodes:
            return True
        w = self.cfg.success_window
        return bool(w) and finetune_should_stop(result.successes, w,
                                                self.cfg.max_episodes)

    # --------------------------------------------------------------- run

    def run(self, stop_workers=None) -> OnlineResult:
        result = OnlineResult()
        self._publish(result)
        self._top_up_requests(result)
        while not self._target_met(result):
            events = self.client.poll_events(self._cursor,
                                             timeout_ms=self.cfg.poll_timeout_ms)
            self._handle(events, result)
            self._top_up_requests(result)
        if self.cfg.success_window and result.episodes < self.cfg.max_episodes:
            result.stop_reason = "solved"
        self._stopping = True
        if stop_workers is not None:
            stop_workers()
        # workers are gone; anything they uploaded is already journaled
        self._handle(self.client.poll_events(self._cursor, timeout_ms=0), result)
        self._publish(result)
        return result
