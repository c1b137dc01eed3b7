"""Run one policy episode and record it as an EpisodeLog.

Shared by the headless worker, the training drivers, and the eval harness so
every recording in the system has the same shape regardless of who made it.
"""

from __future__ import annotations

import time

import numpy as np

from .logs import EpisodeLog, StepRecord
from .policy import PolicySnapshot, ResidualAction, compose, sample_action, unicycle_base
from .procgen import LayoutSpec
from .rng import stream
from .sim import SimConfig, WheelCommand, reset, step


def run_episode(layout: LayoutSpec, config: SimConfig, snapshot: PolicySnapshot,
                seed: int, stochastic: bool = True, worker_id: str = "local",
                request_id: str = "", record_true_pose: bool = True,
                warmup_random=False) -> EpisodeLog:
    """Roll the policy to termination, returning the full log.

    stochastic=True samples the actor (collection mode); False squashes the
    mean (evaluation mode). warmup_random replaces the policy with uniform
    random residuals for the exploration phase before learning starts: True
    randomizes every step, an int randomizes only that many initial steps.
    """
    state, obs = reset(layout, config, seed)
    action_rng = stream(seed, "rollout", "actions")
    if warmup_random is True:
        random_steps = config.max_steps
    else:
        random_steps = int(warmup_random)
    log = EpisodeLog(
        worker_id=worker_id,
        request_id=request_id,
        policy_id=snapshot.policy_id,
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
        residual = None
        logp = None
        if snapshot.action_spec.kind == "residual":
            if t < random_steps:
                residual = ResidualAction(float(action_rng.uniform(-1, 1)),
                                          float(action_rng.uniform(-1, 1)))
            else:
                residual, logp = sample_action(
                    snapshot, obs, rng=action_rng, deterministic=not stochastic)
            cmd = compose(unicycle_base(obs.alpha), residual, snapshot.action_spec.beta)
        else:
            from .policy import policy_command

            cmd = policy_command(snapshot, obs)
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
            pose_true=state.pose_true.as_tuple() if record_true_pose else None,
            residual=(residual.dv_l, residual.dv_r) if residual is not None else None,
            log_prob=logp,
            event=event,
        ))
        t += 1
    log.stop_reason = log.steps[-1].event
    log.duration_s = time.monotonic() - t0
    log.final_features = obs.features
    log.final_goal_distance = obs.goal_distance
    log.final_alpha = obs.alpha
    return log
