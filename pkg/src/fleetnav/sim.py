"""Episodic differential-drive simulation inside a generated layout.

The robot is a disc driven by two wheel commands in [-1, 1]. Commands map to
target wheel speeds through a first-order lag with multiplicative Gaussian
actuation noise; the pose integrates exact arcs. Sensors are planar: a pencil
of depth rays or a floor-boundary scanline from a pinhole camera model. Pose
estimation drifts and can lose tracking, emulating a phone's visual-inertial
odometry. Everything is deterministic in (layout, config, seed, commands).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EpisodeEnded, InvalidArgument, InvalidLayout
from .geometry import Pose2D, StaticWorld, capsule_hits, disc_hits, raycast, wrap_angle
from .procgen import LayoutSpec
from .rng import stream

STEP_EVENTS = ("none", "goal_reached", "collision", "timeout", "tracking_lost")
STOP_REASONS = ("goal_reached", "collision", "timeout", "tracking_lost", "user_stop", "user_cancel")

FEATURE_KINDS = ("depth_rays", "boundary")


@dataclass(frozen=True)
class WheelCommand:
    tau_l: float
    tau_r: float

    def __post_init__(self):
        object.__setattr__(self, "tau_l", float(min(1.0, max(-1.0, self.tau_l))))
        object.__setattr__(self, "tau_r", float(min(1.0, max(-1.0, self.tau_r))))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera, optical axis horizontal at height `height`."""

    height: float = 0.25
    columns: int = 64
    rows: int = 32
    hfov: float = math.radians(70.0)
    max_range: float = 5.0

    def __post_init__(self):
        if self.columns < 2 or self.rows < 2:
            raise InvalidArgument("camera needs at least 2x2 pixels")
        if not (0.0 < self.hfov < math.pi):
            raise InvalidArgument("hfov must lie in (0, pi)")

    @property
    def focal(self) -> float:
        return (self.columns / 2.0) / math.tan(self.hfov / 2.0)

    @property
    def cx(self) -> float:
        return self.columns / 2.0

    @property
    def cy(self) -> float:
        return self.rows / 2.0


@dataclass(frozen=True)
class EstimationNoiseConfig:
    """Drift and tracking-loss model for the pose estimator.

    sigma_pos is the position drift std per meter traveled, sigma_theta the
    heading drift std per radian turned. Tracking loss is a per-step hazard
    p0 + k*|omega|.
    """

    sigma_pos: float = 0.01
    sigma_theta: float = 0.005
    loss_p0: float = 0.0005
    loss_k: float = 0.002

    @classmethod
    def zero(cls) -> "EstimationNoiseConfig":
        return cls(sigma_pos=0.0, sigma_theta=0.0, loss_p0=0.0, loss_k=0.0)


@dataclass(frozen=True)
class ObsSpec:
    """What one observation frame contains and how frames stack.

    n_features is the ray count for depth_rays and must equal the camera's
    column count for boundary features.
    """

    feature_kind: str = "depth_rays"  # or "boundary"
    n_features: int = 11
    history: int = 5
    d_norm: float = 10.0

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise InvalidArgument(f"unknown feature kind {self.feature_kind!r}")
        if self.n_features < 1 or self.history < 1 or self.d_norm <= 0:
            raise InvalidArgument("n_features, history and d_norm must be positive")

    @property
    def frame_width(self) -> int:
        return self.n_features + 2  # plus goal distance and heading error

    @property
    def input_width(self) -> int:
        return self.history * self.frame_width

    def to_dict(self) -> dict:
        return {"feature_kind": self.feature_kind, "n_features": self.n_features,
                "history": self.history, "d_norm": self.d_norm}

    @classmethod
    def from_dict(cls, doc: dict) -> "ObsSpec":
        return cls(feature_kind=doc["feature_kind"], n_features=int(doc["n_features"]),
                   history=int(doc["history"]), d_norm=float(doc["d_norm"]))


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    wheel_base: float = 0.15
    robot_radius: float = 0.12
    v_max: float = 0.5
    motor_time_constant: float = 0.2
    actuation_noise_sigma: float = 0.05
    max_steps: int = 500
    goal_radius: float = 0.3
    camera: CameraModel = field(default_factory=CameraModel)
    estimation: EstimationNoiseConfig = field(default_factory=EstimationNoiseConfig)
    obs: ObsSpec = field(default_factory=ObsSpec)

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidArgument("dt must be positive")
        for name in ("wheel_base", "robot_radius", "v_max", "goal_radius", "motor_time_constant"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be >= 1")
        if self.obs.feature_kind == "boundary" and self.obs.n_features != self.camera.columns:
            raise InvalidArgument("boundary features must have one entry per camera column")

    def digest(self) -> str:
        """Stable content hash over every config field."""
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


@dataclass
class Observation:
    goal_distance: float  # normalized by d_norm, clipped to [0, 1]
    alpha: float  # heading error, radians in (-pi, pi]
    features: np.ndarray  # current frame's sensor features, each in [0, 1]
    vector: np.ndarray  # stacked history, float32, oldest frame first


@dataclass
class SimState:
    layout: LayoutSpec
    config: SimConfig
    world: StaticWorld
    pose_true: Pose2D
    pose_est: Pose2D
    wheel_speed_l: float
    wheel_speed_r: float
    step_count: int
    tracking_lost: bool
    ended: bool
    rng: np.random.Generator
    history: list  # most recent frame last


def goal_features(pose_est: Pose2D, goal) -> tuple:
    """(distance to goal, heading error) from the estimated pose.

    The heading error is 0 by convention when the distance is exactly 0.
    """
    gx, gy = float(goal[0]), float(goal[1])
    dx = gx - pose_est.x
    dy = gy - pose_est.y
    dist = math.hypot(dx, dy)
    if dist == 0.0:
        return 0.0, 0.0
    alpha = wrap_angle(math.atan2(dy, dx) - pose_est.theta)
    return dist, alpha


def depth_rays_observation(state: SimState, n_rays: int = 11, max_range: float = None) -> np.ndarray:
    """Distances along n_rays azimuths spanning the camera FOV, in [0, 1]."""
    if n_rays < 1:
        raise InvalidArgument("n_rays must be >= 1")
    cam = state.config.camera
    rng_max = cam.max_range if max_range is None else max_range
    half = cam.hfov / 2.0
    offsets = np.linspace(-half, half, n_rays) if n_rays > 1 else np.array([0.0])
    angles = state.pose_true.theta + offsets
    d = raycast(state.world, state.pose_true.position, angles, rng_max)
    return (d / rng_max).astype(np.float64)


def boundary_observation(state: SimState, camera: CameraModel = None) -> np.ndarray:
    """Row of the floor/obstacle boundary per image column, normalized to [0, 1].

    Column azimuth phi(u) = atan((u + 0.5 - c_x) / f); the boundary row for a
    hit at planar distance d is c_y + f*h / (d*cos(phi)), i.e. the projection
    of the obstacle's base point. Columns to the right of the image center
    look to the robot's right (world angle heading - phi).
    """
    cam = state.config.camera if camera is None else camera
    u = np.arange(cam.columns)
    phi = np.arctan((u + 0.5 - cam.cx) / cam.focal)
    angles = state.pose_true.theta - phi
    d = raycast(state.world, state.pose_true.position, angles, cam.max_range)
    ahead = d * np.cos(phi)  # distance along the optical axis
    v = cam.cy + cam.focal * cam.height / np.maximum(ahead, 1e-9)
    v = np.clip(v, 0.0, cam.rows)
    return v / cam.rows


def _sensor_frame(state: SimState) -> np.ndarray:
    spec = state.config.obs
    if spec.feature_kind == "depth_rays":
        feats = depth_rays_observation(state, spec.n_features)
    else:
        feats = boundary_observation(state)
    dist, alpha = goal_features(state.pose_est, state.layout.goal_position)
    d_n = min(dist / spec.d_norm, 1.0)
    return np.concatenate([feats, [d_n, alpha]])


def _observation(state: SimState) -> Observation:
    spec = state.config.obs
    frame = _sensor_frame(state)
    state.history.append(frame)
    if len(state.history) > spec.history:
        del state.history[: len(state.history) - spec.history]
    width = len(frame)
    stacked = np.zeros((spec.history, width), dtype=np.float64)
    for i, f in enumerate(reversed(state.history)):
        stacked[spec.history - 1 - i] = f
    return Observation(
        goal_distance=float(frame[-2]),
        alpha=float(frame[-1]),
        features=frame[:-2].copy(),
        vector=stacked.reshape(-1).astype(np.float32),
    )


def reset(layout: LayoutSpec, config: SimConfig, seed: int) -> tuple:
    """Fresh episode at the layout's start pose. Returns (state, observation)."""
    world = layout.world()
    pose = Pose2D(*layout.start_pose)
    if disc_hits(world, pose.position, config.robot_radius):
        raise InvalidLayout("start pose collides with the layout")
    state = SimState(
        layout=layout,
        config=config,
        world=world,
        pose_true=pose,
        pose_est=pose,
        wheel_speed_l=0.0,
        wheel_speed_r=0.0,
        step_count=0,
        tracking_lost=False,
        ended=False,
        rng=stream(seed, "sim"),
        history=[],
    )
    return state, _observation(state)


def estimation_step(noise: EstimationNoiseConfig, pose_true: Pose2D, prev_true: Pose2D,
                    prev_est: Pose2D, omega: float, rng: np.random.Generator) -> tuple:
    """Advance the estimated pose by the true relative motion plus drift.

    Returns (pose_est, tracking_lost). Drift std scales with motion size, so
    a zero-noise config reproduces the true pose exactly.
    """
    # True motion expressed in the previous true body frame.
    c, s = math.cos(prev_true.theta), math.sin(prev_true.theta)
    wx = pose_true.x - prev_true.x
    wy = pose_true.y - prev_true.y
    bx = c * wx + s * wy
    by = -s * wx + c * wy
    dtheta = wrap_angle(pose_true.theta - prev_true.theta)

    dist = math.hypot(bx, by)
    eps = rng.standard_normal(3)
    bx += noise.sigma_pos * dist * eps[0]
    by += noise.sigma_pos * dist * eps[1]
    dtheta += noise.sigma_theta * abs(dtheta) * eps[2]

    ce, se = math.cos(prev_est.theta), math.sin(prev_est.theta)
    est = Pose2D(
        prev_est.x + ce * bx - se * by,
        prev_est.y + se * bx + ce * by,
        prev_est.theta + dtheta,
    )
    hazard = noise.loss_p0 + noise.loss_k * abs(omega)
    lost = bool(rng.random() < hazard)
    return est, lost


def check_termination(state: SimState, collided: bool = False) -> str:
    """Stop reason for the current state, or None. Collision wins ties."""
    if collided:
        return "collision"
    dist, _ = goal_features(state.pose_est, state.layout.goal_position)
    if dist <= state.config.goal_radius:
        return "goal_reached"
    if state.tracking_lost:
        return "tracking_lost"
    if state.step_count >= state.config.max_steps:
        return "timeout"
    return None


def step(state: SimState, cmd: WheelCommand) -> tuple:
    """Advance one control interval. Returns (state, observation, event)."""
    if state.ended:
        raise EpisodeEnded("step() called after a terminal event")
    cfg = state.config

    eps = state.rng.standard_normal(2)
    target_l = cmd.tau_l * cfg.v_max * (1.0 + cfg.actuation_noise_sigma * eps[0])
    target_r = cmd.tau_r * cfg.v_max * (1.0 + cfg.actuation_noise_sigma * eps[1])
    lam = 1.0 - math.exp(-cfg.dt / cfg.motor_time_constant)
    state.wheel_speed_l += lam * (target_l - state.wheel_speed_l)
    state.wheel_speed_r += lam * (target_r - state.wheel_speed_r)

    v = (state.wheel_speed_l + state.wheel_speed_r) / 2.0
    omega = (state.wheel_speed_r - state.wheel_speed_l) / cfg.wheel_base

    prev_true = state.pose_true
    th = prev_true.theta
    if abs(omega) > 1e-6:
        th1 = th + omega * cfg.dt
        x1 = prev_true.x + (v / omega) * (math.sin(th1) - math.sin(th))
        y1 = prev_true.y - (v / omega) * (math.cos(th1) - math.cos(th))
    else:
        x1 = prev_true.x + v * cfg.dt * math.cos(th)
        y1 = prev_true.y + v * cfg.dt * math.sin(th)
        th1 = th + omega * cfg.dt
    new_pose = Pose2D(x1, y1, th1)

    collided = capsule_hits(state.world, prev_true.position, new_pose.position,
                            cfg.robot_radius)
    state.pose_true = new_pose

    est, lost = estimation_step(cfg.estimation, new_pose, prev_true,
                                state.pose_est, omega, state.rng)
    state.pose_est = est
    if lost:
        state.tracking_lost = True

    state.step_count += 1
    reason = check_termination(state, collided=collided)
    obs = _observation(state)
    if reason is not None:
        state.ended = True
        return state, obs, reason
    return state, obs, "none"
