"""Training drivers: procgen pretraining and on-robot finetuning loops.

Both loops share the collection path with the fleet: every episode becomes an
EpisodeLog, rewards are assigned post hoc from the logged estimated poses, and
the resulting trajectory is pushed into the replay buffer.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

from ..errors import InvalidArgument
from ..logs import EpisodeLog
from ..procgen import LayoutSpec
from ..rng import stream
from ..rollout import run_episode
from ..sim import SimConfig
from .replay import ReplayBuffer
from .rewards import RewardConfig, assign_rewards
from .sac import SacConfig, SacLearner

DIAG_FIELDS = ("episode", "env_steps", "updates", "stop_reason", "steps",
               "episode_return", "recent_success_rate", "q1_loss", "actor_loss",
               "alpha", "entropy")


def finetune_should_stop(successes, window: int = 10, max_episodes: int = 200) -> bool:
    """Stop once the last `window` episodes all succeeded, or at the cap."""
    n = len(successes)
    if n >= max_episodes:
        return True
    return n >= window and all(successes[-window:])


@dataclass
class TrainResult:
    learner: SacLearner
    buffer: ReplayBuffer
    episodes: int = 0
    env_steps: int = 0
    updates: int = 0
    successes: list = field(default_factory=list)
    stop_reason: str = "budget"
    eval_history: list = field(default_factory=list)

    @property
    def recent_success_rate(self) -> float:
        tail = self.successes[-100:]
        return sum(tail) / len(tail) if tail else 0.0


class _DiagWriter:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8", newline="") if path else None
        if self.fh:
            self.writer = csv.DictWriter(self.fh, fieldnames=DIAG_FIELDS)
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        if self.fh:
            self.writer.writerow({k: row.get(k, "") for k in DIAG_FIELDS})
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _collect_and_push(learner: SacLearner, buffer: ReplayBuffer, layout: LayoutSpec,
                      config: SimConfig, episode_seed: int, warmup_left: int,
                      reward_cfg: RewardConfig, policy_id: int) -> tuple:
    snap = learner.snapshot(policy_id, config.obs)
    log = run_episode(layout, config, snap, episode_seed, stochastic=True,
                      warmup_random=max(0, warmup_left))
    traj = assign_rewards(log, reward_cfg)
    buffer.push(traj)
    return log, traj


def _train_on_episode(learner: SacLearner, buffer: ReplayBuffer, n_steps: int) -> tuple:
    """G gradient steps per collected env step, once the buffer can fill a batch."""
    cfg = learner.cfg
    updates = 0
    diag = {}
    if buffer.size >= cfg.batch_size:
        for _ in range(n_steps * cfg.grad_steps_per_env_step):
            diag = learner.update(buffer.sample(cfg.batch_size, learner.rng))
            updates += 1
    return updates, diag


def pretrain(layouts, config: SimConfig, *, sac_cfg: SacConfig = None,
             max_episodes: int = 20000, seed: int = 0,
             reward_cfg: RewardConfig = None, buffer: ReplayBuffer = None,
             diag_path=None, eval_hook=None, eval_every: int = 500,
             stop_success_rate: float = None, max_wall_seconds: float = None,
             on_episode=None) -> TrainResult:
    """Train from scratch over a pool of generated layouts.

    eval_hook(learner, episode_index) may return a dict; if it contains
    "success_rate" at or above stop_success_rate the loop stops early.
    """
    layouts = list(layouts)
    if not layouts:
        raise InvalidArgument("layout pool is empty")
    cfg = sac_cfg or SacConfig()
    reward_cfg = reward_cfg or RewardConfig()
    learner = SacLearner(config.obs.input_width, cfg=cfg, seed=seed)
    buffer = buffer or ReplayBuffer(config.obs.input_width)
    driver_rng = stream(seed, "pretrain-driver")
    result = TrainResult(learner=learner, buffer=buffer)
    diag = _DiagWriter(diag_path)
    t0 = time.monotonic()
    try:
        for episode in range(max_episodes):
            layout = layouts[int(driver_rng.integers(len(layouts)))]
            episode_seed = int(driver_rng.integers(2 ** 62))
            warmup_left = cfg.warmup_steps - result.env_steps
            log, traj = _collect_and_push(learner, buffer, layout, config,
                                          episode_seed, warmup_left, reward_cfg,
                                          policy_id=episode)
            n = len(log.steps)
            result.env_steps += n
            result.episodes += 1
            result.successes.append(log.stop_reason == "goal_reached")
            updates, upd_diag = _train_on_episode(learner, buffer, n)
            result.updates += updates
            diag.write({
                "episode": episode,
                "env_steps": result.env_steps,
                "updates": result.updates,
                "stop_reason": log.stop_reason,
                "steps": n,
                "episode_return": round(float(traj.rewards.sum()), 4),
                "recent_success_rate": round(result.recent_success_rate, 4),
                "q1_loss": round(upd_diag.get("q1_loss", 0.0), 6),
                "actor_loss": round(upd_diag.get("actor_loss", 0.0), 6),
                "alpha": round(upd_diag.get("alpha", learner.alpha), 6),
                "entropy": round(upd_diag.get("entropy", 0.0), 4),
            })
            if on_episode:
                on_episode(result, log)
            if eval_hook and (episode + 1) % eval_every == 0:
                report = eval_hook(learner, episode + 1) or {}
                result.eval_history.append((episode + 1, report))
                if (stop_success_rate is not None
                        and report.get("success_rate", 0.0) >= stop_success_rate):
                    result.stop_reason = "eval_target"
                    return result
            if max_wall_seconds and time.monotonic() - t0 > max_wall_seconds:
                result.stop_reason = "wall_clock"
                return result
        result.stop_reason = "budget"
        return result
    finally:
        diag.close()


def finetune_loop(layout: LayoutSpec, config: SimConfig, learner: SacLearner,
                  buffer: ReplayBuffer = None, *, seed: int = 0,
                  reward_cfg: RewardConfig = None, window: int = 10,
                  max_episodes: int = 200, diag_path=None,
                  on_episode=None) -> TrainResult:
    """Adapt an existing learner to one layout until it is reliably solved.

    Runs episodes on the single target layout, updating after each one, and
    stops as soon as the last `window` consecutive episodes all reached the
    goal, or after `max_episodes`, whichever comes first.
    """
    reward_cfg = reward_cfg or RewardConfig()
    buffer = buffer or ReplayBuffer(config.obs.input_width)
    driver_rng = stream(seed, "finetune-driver")
    result = TrainResult(learner=learner, buffer=buffer)
    diag = _DiagWriter(diag_path)
    try:
        while not finetune_should_stop(result.successes, window, max_episodes):
            episode_seed = int(driver_rng.integers(2 ** 62))
            log, traj = _collect_and_push(learner, buffer, layout, config,
                                          episode_seed, 0, reward_cfg,
                                          policy_id=result.episodes)
            n = len(log.steps)
            result.env_steps += n
            result.episodes += 1
            result.successes.append(log.stop_reason == "goal_reached")
            updates, upd_diag = _train_on_episode(learner, buffer, n)
            result.updates += updates
            diag.write({
                "episode": result.episodes - 1,
                "env_steps": result.env_steps,
                "updates": result.updates,
                "stop_reason": log.stop_reason,
                "steps": n,
                "episode_return": round(float(traj.rewards.sum()), 4),
                "recent_success_rate": round(result.recent_success_rate, 4),
                "q1_loss": round(upd_diag.get("q1_loss", 0.0), 6),
                "actor_loss": round(upd_diag.get("actor_loss", 0.0), 6),
                "alpha": round(upd_diag.get("alpha", learner.alpha), 6),
                "entropy": round(upd_diag.get("entropy", 0.0), 4),
            })
            if on_episode:
                on_episode(result, log)
        solved = (len(result.successes) >= window
                  and all(result.successes[-window:]))
        result.stop_reason = "solved" if solved else "episode_cap"
        return result
    finally:
        diag.close()
