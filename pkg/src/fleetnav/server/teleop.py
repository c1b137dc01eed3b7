"""Server-hosted teleoperation sessions.

The browser is a thin control/view client: it streams wheel commands in,
the server steps the simulator at the configured tick rate and streams
state frames back. Hosting the sim server-side means a teleoperated
recording is built by the same code path as a worker recording and lands
in the store through the same validated upload.

Session lifecycle: driving -> review -> done. The stop button ends the
episode with user_stop and offers the review; cancel discards the episode
and reopens the request without uploading anything. No frame for
`deadman_s` zeroes the wheel command until input resumes.
"""

from __future__ import annotations

import time

from ..errors import InvalidArgument, InvalidTransition
from ..logs import EpisodeLog, StepRecord, dump_episode_log
from ..procgen import LayoutSpec
from ..protocol import validate_teleop_frame
from ..sim import SimConfig, WheelCommand, reset, step

DEADMAN_S = 0.5


class TeleopSession:
    """One teleoperated episode: sim state, its log, and the input gate."""

    def __init__(self, layout: LayoutSpec, config: SimConfig, seed: int, *,
                 session_id: str, worker_id: str, request_id: str,
                 policy_id: int = 0, deadman_s: float = DEADMAN_S):
        if deadman_s <= 0:
            raise InvalidArgument("deadman_s must be positive")
        self.session_id = session_id
        self.deadman_s = deadman_s
        self.phase = "driving"  # driving | review | done
        self.outcome = None  # uploaded | discarded | cancelled once done
        self.state, self.obs = reset(layout, config, seed)
        self.command = (0.0, 0.0)
        self.last_seq = None
        self.last_input_time = None
        self.stop_requested = False
        self.cancel_requested = False
        self._t0 = time.monotonic()
        self.log = EpisodeLog(
            worker_id=worker_id,
            request_id=request_id,
            policy_id=policy_id,
            layout_seed=layout.seed,
            sim_config_digest=config.digest(),
            start_time_ms=int(time.time() * 1000),
            start_pose=tuple(layout.start_pose),
            goal=tuple(layout.goal_position),
            obs_spec=config.obs,
            episode_seed=int(seed),
        )

    # ----------------------------------------------------------------- input

    def apply_frame(self, doc: dict, now: float) -> bool:
        """Take one TeleopFrame; returns False for stale (non-increasing) seq."""
        validate_teleop_frame(doc)
        if self.phase != "driving":
            raise InvalidTransition(f"teleop input in phase {self.phase!r}")
        seq = int(doc["seq"])
        if self.last_seq is not None and seq <= self.last_seq:
            return False
        self.last_seq = seq
        self.command = (float(doc["tau_l"]), float(doc["tau_r"]))
        self.last_input_time = now
        buttons = doc.get("buttons") or {}
        if buttons.get("stop"):
            self.stop_requested = True
        if buttons.get("cancel"):
            self.cancel_requested = True
        return True

    def _applied_command(self, now: float) -> tuple:
        if (self.last_input_time is None
                or now - self.last_input_time >= self.deadman_s):
            return (0.0, 0.0)
        return self.command

    # ------------------------------------------------------------------ steps

    def tick(self, now: float) -> dict:
        """Advance one sim step and report the resulting StateFrame."""
        if self.phase != "driving":
            raise InvalidTransition(f"tick in phase {self.phase!r}")
        if self.cancel_requested:
            self._finish("user_cancel")
            self.phase = "done"
            self.outcome = "cancelled"
            return self.state_frame("none", "cancelled", (0.0, 0.0))

        tau_l, tau_r = self._applied_command(now)
        prev = self.obs
        self.state, self.obs, event = step(self.state, WheelCommand(tau_l, tau_r))
        self.log.steps.append(StepRecord(
            t=len(self.log.steps),
            features=prev.features,
            goal_distance=prev.goal_distance,
            alpha=prev.alpha,
            action=(tau_l, tau_r),
            pose_est=self.state.pose_est.as_tuple(),
            pose_true=self.state.pose_true.as_tuple(),
            event=event,
        ))
        if event != "none":
            self._finish(event)
            self.phase = "review"
        elif self.stop_requested:
            # Manual stop: terminal reason on the log, but the step itself
            # carries no sim event (the log validator counts on that).
            self._finish("user_stop")
            self.phase = "review"
        status = "review" if self.phase == "review" else "driving"
        return self.state_frame(event, status, (tau_l, tau_r))

    def _finish(self, reason: str) -> None:
        self.log.stop_reason = reason
        self.log.duration_s = time.monotonic() - self._t0
        self.log.final_features = self.obs.features
        self.log.final_goal_distance = self.obs.goal_distance
        self.log.final_alpha = self.obs.alpha

    # ---------------------------------------------------------------- outputs

    def state_frame(self, event: str, status: str, command: tuple) -> dict:
        pose = self.state.pose_est
        return {
            "kind": "state",
            "session_id": self.session_id,
            "step": self.state.step_count,
            "pose_est": [pose.x, pose.y, pose.theta],
            "goal": list(self.log.goal),
            "boundary": [float(v) for v in self.obs.features],
            "goal_distance": self.obs.goal_distance,
            "alpha": self.obs.alpha,
            "command": [command[0], command[1]],
            "event": event,
            "status": status,
        }

    def review_frame(self) -> dict:
        """StateFrame re-sent on resume so a reconnecting client can render."""
        return self.state_frame(self.log.steps[-1].event if self.log.steps
                                else "none", self.phase, (0.0, 0.0))

    def log_text(self) -> str:
        if self.phase not in ("review", "done"):
            raise InvalidTransition("episode is still running")
        return dump_episode_log(self.log)
