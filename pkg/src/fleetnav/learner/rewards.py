"""Post-hoc reward assignment: recordings carry no rewards, trajectories do.

Terminal constants follow the deployed system's convention: +5 for reaching
the goal, -1 for a collision, -0.5 for losing tracking, 0 for timeouts and
user stops. Dense shaping (progress toward the goal plus a small time
penalty) is on by default and removed entirely by sparse_mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import MalformedLog
from ..logs import EpisodeLog, stacked_observations
from ..sim import STOP_REASONS

TERMINAL_REWARDS = {
    "goal_reached": 5.0,
    "collision": -1.0,
    "tracking_lost": -0.5,
    "timeout": 0.0,
    "user_stop": 0.0,
    "user_cancel": 0.0,
}


@dataclass(frozen=True)
class RewardConfig:
    goal: float = 5.0
    collision: float = -1.0
    tracking_lost: float = -0.5
    timeout: float = 0.0
    progress_weight: float = 1.0  # w on per-step distance progress
    time_penalty: float = -0.01
    sparse_mode: bool = False
    gamma: float = 0.99  # stored as the per-step discount on non-terminal steps

    def terminal(self, stop_reason: str) -> float:
        table = {
            "goal_reached": self.goal,
            "collision": self.collision,
            "tracking_lost": self.tracking_lost,
            "timeout": self.timeout,
            "user_stop": 0.0,
            "user_cancel": 0.0,
        }
        return table[stop_reason]


@dataclass
class Trajectory:
    """Aligned per-timestep arrays; entry t is (obs_t, action_t, r_t, ...).

    reward_t is the reward received on arrival at t (so reward_0 = 0), and
    discount_t is 0 exactly on the terminal entry. N+1 entries make N
    transitions.
    """

    observations: np.ndarray  # (N+1, input_width) float32
    actions: np.ndarray  # (N+1, 2) float32; last row unused (zeros)
    rewards: np.ndarray  # (N+1,) float32
    discounts: np.ndarray  # (N+1,) float32
    step_types: list  # "first", "mid"*, "last"
    stop_reason: str = None
    layout_seed: int = None
    worker_id: str = None
    policy_id: int = None
    actions_are_residuals: bool = False

    def __len__(self) -> int:
        return len(self.rewards)


def assign_rewards(log: EpisodeLog, cfg: RewardConfig = None) -> Trajectory:
    """Turn a recording into a reward-labeled trajectory.

    Distances for shaping come from the logged estimated poses, matching what
    the recording device could have known.
    """
    cfg = cfg or RewardConfig()
    if not log.steps:
        raise MalformedLog("cannot assign rewards to an empty log")
    if log.stop_reason not in STOP_REASONS:
        raise MalformedLog(f"missing or unknown stop reason {log.stop_reason!r}")
    for rec in log.steps:
        if rec.pose_est is None:
            raise MalformedLog(f"step {rec.t} lacks pose_est")

    n = len(log.steps)
    gx, gy = log.goal
    dists = np.empty(n + 1)
    dists[0] = np.hypot(gx - log.start_pose[0], gy - log.start_pose[1])
    for i, rec in enumerate(log.steps):
        dists[i + 1] = np.hypot(gx - rec.pose_est[0], gy - rec.pose_est[1])

    rewards = np.zeros(n + 1, dtype=np.float32)
    if not cfg.sparse_mode:
        rewards[1:] = cfg.progress_weight * (dists[:-1] - dists[1:]) + cfg.time_penalty
    rewards[n] += cfg.terminal(log.stop_reason)

    use_residuals = all(rec.residual is not None for rec in log.steps)
    actions = np.zeros((n + 1, 2), dtype=np.float32)
    for i, rec in enumerate(log.steps):
        actions[i] = rec.residual if use_residuals else rec.action

    discounts = np.full(n + 1, cfg.gamma, dtype=np.float32)
    discounts[n] = 0.0
    step_types = ["first"] + ["mid"] * (n - 1) + ["last"]
    return Trajectory(
        observations=stacked_observations(log),
        actions=actions,
        rewards=rewards,
        discounts=discounts,
        step_types=step_types,
        stop_reason=log.stop_reason,
        layout_seed=log.layout_seed,
        worker_id=log.worker_id,
        policy_id=log.policy_id,
        actions_are_residuals=use_residuals,
    )
