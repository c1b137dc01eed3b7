"""Episode logs: the JSON-lines recording format shared by all components.

A log is one header line, one line per step, and one footer line. Rewards are
deliberately absent: they are assigned later by the learner, so the recording
side never needs to know the reward function. Step records carry the
observation frame the policy saw, the executed wheel command, the residual
action when one was used, and the estimated (optionally true) pose after the
step.

Observations are stored per-frame; `stacked_observations` rebuilds the
zero-padded history stacks exactly as the simulator emits them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedLog
from .sim import STOP_REASONS, ObsSpec

LOG_FORMAT_VERSION = 1
MIN_LOGGED_START_GOAL_DISTANCE = 2.0


@dataclass
class StepRecord:
    t: int
    features: np.ndarray  # sensor features in [0, 1]
    goal_distance: float  # normalized
    alpha: float
    action: tuple  # executed wheel command (tau_l, tau_r)
    pose_est: tuple  # (x, y, theta) after the step
    pose_true: tuple = None
    residual: tuple = None  # (dv_l, dv_r) when a residual policy produced action
    log_prob: float = None
    event: str = "none"


@dataclass
class EpisodeLog:
    worker_id: str
    request_id: str
    policy_id: int
    layout_seed: int
    sim_config_digest: str
    start_time_ms: int
    start_pose: tuple
    goal: tuple
    obs_spec: ObsSpec
    episode_seed: int
    steps: list = field(default_factory=list)
    stop_reason: str = None
    duration_s: float = 0.0
    final_features: np.ndarray = None
    final_goal_distance: float = None
    final_alpha: float = None

    @property
    def start_goal_distance(self) -> float:
        return float(np.hypot(self.goal[0] - self.start_pose[0],
                              self.goal[1] - self.start_pose[1]))


def _obs_doc(features, goal_distance, alpha) -> dict:
    return {"f": [float(v) for v in features], "d": float(goal_distance), "a": float(alpha)}


def dump_episode_log(log: EpisodeLog) -> str:
    header = {
        "kind": "header",
        "format_version": LOG_FORMAT_VERSION,
        "worker_id": log.worker_id,
        "request_id": log.request_id,
        "policy_id": log.policy_id,
        "layout_seed": log.layout_seed,
        "sim_config_digest": log.sim_config_digest,
        "start_time_ms": log.start_time_ms,
        "start_pose": list(log.start_pose),
        "goal": list(log.goal),
        "start_goal_distance": log.start_goal_distance,
        "obs_spec": log.obs_spec.to_dict(),
        "episode_seed": log.episode_seed,
    }
    lines = [json.dumps(header)]
    for rec in log.steps:
        doc = {
            "kind": "step",
            "t": rec.t,
            "obs": _obs_doc(rec.features, rec.goal_distance, rec.alpha),
            "action": list(rec.action),
            "pose_est": list(rec.pose_est),
            "event": rec.event,
        }
        if rec.pose_true is not None:
            doc["pose_true"] = list(rec.pose_true)
        if rec.residual is not None:
            doc["residual"] = list(rec.residual)
        if rec.log_prob is not None:
            doc["log_prob"] = rec.log_prob
        lines.append(json.dumps(doc))
    footer = {
        "kind": "footer",
        "stop_reason": log.stop_reason,
        "steps": len(log.steps),
        "duration_s": log.duration_s,
        "final_obs": _obs_doc(log.final_features, log.final_goal_distance, log.final_alpha),
    }
    lines.append(json.dumps(footer))
    return "\n".join(lines) + "\n"


def parse_episode_log(text) -> EpisodeLog:
    """Parse and structurally check a JSON-lines episode log.

    Raises MalformedLog on any structural defect; use `validate_episode_log`
    for the content rules shared by worker and server.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedLog(f"log is not UTF-8: {exc}") from exc
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if len(lines) < 2:
        raise MalformedLog("log needs at least a header and a footer line")
    docs = []
    for i, ln in enumerate(lines):
        try:
            docs.append(json.loads(ln))
        except json.JSONDecodeError as exc:
            raise MalformedLog(f"line {i + 1} is not valid JSON: {exc.msg}") from exc
    try:
        header, body, footer = docs[0], docs[1:-1], docs[-1]
        if header.get("kind") != "header":
            raise MalformedLog("first line must be the header")
        if header.get("format_version") != LOG_FORMAT_VERSION:
            raise MalformedLog(f"unsupported format_version {header.get('format_version')}")
        if footer.get("kind") != "footer":
            raise MalformedLog("last line must be the footer")
        steps = []
        for doc in body:
            if doc.get("kind") != "step":
                raise MalformedLog("interior lines must be step records")
            obs = doc["obs"]
            steps.append(StepRecord(
                t=int(doc["t"]),
                features=np.asarray(obs["f"], dtype=np.float64),
                goal_distance=float(obs["d"]),
                alpha=float(obs["a"]),
                action=tuple(doc["action"]),
                pose_est=tuple(doc["pose_est"]),
                pose_true=tuple(doc["pose_true"]) if "pose_true" in doc else None,
                residual=tuple(doc["residual"]) if "residual" in doc else None,
                log_prob=doc.get("log_prob"),
                event=doc.get("event", "none"),
            ))
        final_obs = footer["final_obs"]
        log = EpisodeLog(
            worker_id=header["worker_id"],
            request_id=header["request_id"],
            policy_id=int(header["policy_id"]),
            layout_seed=int(header["layout_seed"]),
            sim_config_digest=header["sim_config_digest"],
            start_time_ms=int(header["start_time_ms"]),
            start_pose=tuple(header["start_pose"]),
            goal=tuple(header["goal"]),
            obs_spec=ObsSpec.from_dict(header["obs_spec"]),
            episode_seed=int(header["episode_seed"]),
            steps=steps,
            stop_reason=footer["stop_reason"],
            duration_s=float(footer["duration_s"]),
            final_features=np.asarray(final_obs["f"], dtype=np.float64),
            final_goal_distance=float(final_obs["d"]),
            final_alpha=float(final_obs["a"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedLog(f"log structure invalid: {exc}") from exc
    if int(footer["steps"]) != len(steps):
        raise MalformedLog(
            f"footer declares {footer['steps']} steps, log has {len(steps)}")
    return log


def validate_episode_log(log: EpisodeLog) -> list:
    """Content rules applied identically by the worker and the server."""
    violations = []
    if log.stop_reason not in STOP_REASONS:
        violations.append(f"unknown stop_reason {log.stop_reason!r}")
    if not log.steps:
        violations.append("log has no steps")
    if log.start_goal_distance < MIN_LOGGED_START_GOAL_DISTANCE:
        violations.append(
            f"start-goal distance {log.start_goal_distance:.3f} m is below "
            f"{MIN_LOGGED_START_GOAL_DISTANCE} m")
    for i, rec in enumerate(log.steps):
        if rec.t != i:
            violations.append(f"step {i} has non-consecutive index {rec.t}")
            break
    width = log.obs_spec.n_features
    for rec in log.steps:
        if len(rec.features) != width:
            violations.append(
                f"step {rec.t}: {len(rec.features)} features, obs spec says {width}")
            break
        if not np.all(np.isfinite(rec.features)):
            violations.append(f"step {rec.t}: non-finite features")
            break
    if log.steps and log.steps[-1].event == "none" and log.stop_reason in (
            "goal_reached", "collision", "timeout", "tracking_lost"):
        violations.append("terminal stop_reason but last step event is none")
    if log.final_features is None or len(log.final_features) != width:
        violations.append("footer final observation missing or wrong width")
    return violations


def frame_sequence(log: EpisodeLog) -> np.ndarray:
    """(N+1, frame_width) observation frames: before each action, then final."""
    width = log.obs_spec.frame_width
    out = np.zeros((len(log.steps) + 1, width), dtype=np.float64)
    for i, rec in enumerate(log.steps):
        out[i] = np.concatenate([rec.features, [rec.goal_distance, rec.alpha]])
    out[-1] = np.concatenate(
        [log.final_features, [log.final_goal_distance, log.final_alpha]])
    return out


def stacked_observations(log: EpisodeLog) -> np.ndarray:
    """(N+1, input_width) stacked history vectors, zero-padded at the start.

    Row i reproduces exactly the vector the simulator emitted at time i.
    """
    frames = frame_sequence(log)
    spec = log.obs_spec
    n, width = frames.shape
    out = np.zeros((n, spec.history, width), dtype=np.float64)
    for i in range(n):
        lo = max(0, i - spec.history + 1)
        chunk = frames[lo: i + 1]
        out[i, spec.history - len(chunk):] = chunk
    return out.reshape(n, -1).astype(np.float32)
