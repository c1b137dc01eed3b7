"""Scripted expert: a privileged potential-field driver for demonstrations.

The expert reads the true robot pose and the layout geometry, steers along
the sum of a goal attraction and short-range repulsions from walls and
obstacles, and issues wheel commands through the same heading law the
learned policies build on. Obstacle repulsion is rotated a fixed angle to
one side so the field slides around blockers instead of stalling in front
of them.

Its episodes are recorded with the standard logger, so the observations in
the log are the normal (noisy, unprivileged) ones. Behavior cloning then
regresses those observations onto the expert's commands.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .errors import InvalidArgument
from .geometry import wrap_angle
from .logs import EpisodeLog, StepRecord, stacked_observations
from .policy import unicycle_base
from .procgen import LayoutSpec
from .sim import SimConfig, WheelCommand, reset, step

WALL_INFLUENCE = 0.5  # m beyond the robot radius
OBSTACLE_INFLUENCE = 0.9
WALL_GAIN = 0.8
OBSTACLE_GAIN = 1.4
SWIRL_ANGLE = 0.5  # rad; rotates obstacle repulsion to break head-on deadlocks


def _away_from_segments(segments: np.ndarray, p: np.ndarray):
    """Unit vectors from each segment's closest point to p, with distances."""
    a = segments[:, 0:2]
    b = segments[:, 2:4]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.zeros(len(segments))
    nz = denom > 0.0
    t[nz] = np.einsum("ij,ij->i", p - a[nz], ab[nz]) / denom[nz]
    closest = a + np.clip(t, 0.0, 1.0)[:, None] * ab
    diff = p - closest
    dist = np.linalg.norm(diff, axis=1)
    safe = np.maximum(dist, 1e-9)
    return diff / safe[:, None], dist


def _rotate(vectors: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return vectors @ np.array([[c, s], [-s, c]])


def _weights(dist: np.ndarray, influence: float, margin: float) -> np.ndarray:
    """Quadratic falloff from 1 at contact to 0 at the influence radius."""
    gap = np.maximum(dist - margin, 1e-3)
    w = np.zeros_like(gap)
    near = gap < influence
    w[near] = ((influence - gap[near]) / influence) ** 2
    return w


def expert_heading(state, config: SimConfig) -> float:
    """Desired absolute heading at the current true pose."""
    p = np.asarray(state.pose_true.position, dtype=np.float64)
    goal = np.asarray(state.layout.goal_position, dtype=np.float64)
    to_goal = goal - p
    goal_dist = float(np.linalg.norm(to_goal))
    desired = to_goal / max(goal_dist, 1e-9)

    world = state.world
    margin = config.robot_radius
    if len(world.segments):
        away, dist = _away_from_segments(world.segments, p)
        w = _weights(dist, WALL_INFLUENCE, margin)
        desired = desired + WALL_GAIN * (w[:, None] * away).sum(axis=0)
    if len(world.circles):
        diff = p - world.circles[:, 0:2]
        center_dist = np.linalg.norm(diff, axis=1)
        away = diff / np.maximum(center_dist, 1e-9)[:, None]
        surface = center_dist - world.circles[:, 2]
        w = _weights(surface, OBSTACLE_INFLUENCE, margin)
        # ignore obstacles already behind the goal sphere of interest
        w[surface > goal_dist] = 0.0
        desired = desired + OBSTACLE_GAIN * (
            w[:, None] * _rotate(away, SWIRL_ANGLE)).sum(axis=0)
    if len(world.boxes):
        closest = np.clip(p, world.boxes[:, 0:2], world.boxes[:, 2:4])
        diff = p - closest
        dist = np.linalg.norm(diff, axis=1)
        away = diff / np.maximum(dist, 1e-9)[:, None]
        w = _weights(dist, OBSTACLE_INFLUENCE, margin)
        w[dist > goal_dist] = 0.0
        desired = desired + OBSTACLE_GAIN * (
            w[:, None] * _rotate(away, SWIRL_ANGLE)).sum(axis=0)
    return math.atan2(desired[1], desired[0])


def expert_command(state, config: SimConfig) -> WheelCommand:
    alpha = wrap_angle(expert_heading(state, config) - state.pose_true.theta)
    base = unicycle_base(alpha)
    return WheelCommand(base.v_l, base.v_r)


def run_expert_episode(layout: LayoutSpec, config: SimConfig, seed: int,
                       worker_id: str = "expert", request_id: str = "") -> EpisodeLog:
    """Roll the scripted controller to termination; log shape matches run_episode."""
    state, obs = reset(layout, config, seed)
    log = EpisodeLog(
        worker_id=worker_id,
        request_id=request_id,
        policy_id=0,
        layout_seed=layout.seed,
        sim_config_digest=config.digest(),
        start_time_ms=int(time.time() * 1000),
        start_pose=tuple(layout.start_pose),
        goal=tuple(layout.goal_position),
        obs_spec=config.obs,
        episode_seed=int(seed),
    )
    t0 = time.monotonic()
    t = 0
    while not state.ended:
        cmd = expert_command(state, config)
        prev_features = obs.features
        prev_d = obs.goal_distance
        prev_alpha = obs.alpha
        state, obs, event = step(state, cmd)
        log.steps.append(StepRecord(
            t=t,
            features=prev_features,
            goal_distance=prev_d,
            alpha=prev_alpha,
            action=(cmd.tau_l, cmd.tau_r),
            pose_est=state.pose_est.as_tuple(),
            pose_true=state.pose_true.as_tuple(),
            residual=None,
            log_prob=None,
            event=event,
        ))
        t += 1
    log.stop_reason = log.steps[-1].event
    log.duration_s = time.monotonic() - t0
    log.final_features = obs.features
    log.final_goal_distance = obs.goal_distance
    log.final_alpha = obs.alpha
    return log


def collect_expert_dataset(layouts, config: SimConfig, episodes: int,
                           seed: int = 0, keep_failures: bool = False):
    """Demonstration set for cloning: stacked observations and wheel commands.

    Cycles the layout list until `episodes` logs are collected. Episodes that
    do not reach the goal are dropped unless keep_failures is set; the demo
    budget still counts them, so the caller gets at most `episodes` logs.
    """
    layouts = list(layouts)
    if not layouts:
        raise InvalidArgument("no layouts to demonstrate on")
    if episodes < 1:
        raise InvalidArgument("episodes must be >= 1")
    xs, ys, logs = [], [], []
    for i in range(episodes):
        layout = layouts[i % len(layouts)]
        log = run_expert_episode(layout, config, seed=seed + i)
        if log.stop_reason != "goal_reached" and not keep_failures:
            continue
        stacked = stacked_observations(log)
        xs.append(stacked[:len(log.steps)])
        ys.append(np.asarray([rec.action for rec in log.steps], dtype=np.float32))
        logs.append(log)
    if not xs:
        raise InvalidArgument("expert produced no usable demonstrations")
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0), logs
