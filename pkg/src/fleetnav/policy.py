"""Navigation policy: unicycle base controller, residual MLP head, snapshots.

The base controller turns the heading error alpha into wheel commands on the
unit circle; a learned head adds a bounded residual scaled by a gain beta.
Snapshots are a portable two-part container:

    bytes [0, 8)      little-endian u64: manifest byte length M
    bytes [8, 8+M)    UTF-8 JSON manifest, "format_version": 1
    bytes [8+M, ...)  little-endian float32 blob: per layer, the weight
                      matrix (out x in, row-major) followed by the bias

The manifest records policy_id, obs/action specs, layer shapes, and the
sha256 of the weight blob; content_hash is the sha256 of the whole container.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import HashMismatch, InvalidArgument, ParseError, ShapeMismatch, SpecMismatch
from .sim import ObsSpec, Observation, WheelCommand

SNAPSHOT_FORMAT_VERSION = 1
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass(frozen=True)
class UnicycleCommand:
    v_l: float
    v_r: float


@dataclass(frozen=True)
class ResidualAction:
    dv_l: float
    dv_r: float

    def __post_init__(self):
        object.__setattr__(self, "dv_l", float(min(1.0, max(-1.0, self.dv_l))))
        object.__setattr__(self, "dv_r", float(min(1.0, max(-1.0, self.dv_r))))


def unicycle_base(alpha: float) -> UnicycleCommand:
    """Wheel commands steering toward a goal at bearing alpha."""
    if not math.isfinite(alpha):
        raise InvalidArgument("alpha must be finite")
    c, s = math.cos(alpha), math.sin(alpha)
    return UnicycleCommand((c - s) / math.sqrt(2.0), (c + s) / math.sqrt(2.0))


def compose(base: UnicycleCommand, residual: ResidualAction, beta: float) -> WheelCommand:
    """base + beta * residual, clamped to the command box."""
    return WheelCommand(base.v_l + beta * residual.dv_l, base.v_r + beta * residual.dv_r)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpSpec:
    """Plain fully connected net. weights[i] has shape (width_i, in_i)."""

    input_width: int
    widths: tuple  # output width per layer
    activations: tuple  # one of ACTIVATIONS per layer
    weights: list = field(default_factory=list)  # float32 (out, in)
    biases: list = field(default_factory=list)  # float32 (out,)

    def __post_init__(self):
        if len(self.widths) != len(self.activations):
            raise InvalidArgument("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise InvalidArgument(f"unknown activation {act!r}")
        fan_in = self.input_width
        for i, w in enumerate(self.weights):
            if w.shape != (self.widths[i], fan_in):
                raise ShapeMismatch(
                    f"layer {i}: weight shape {w.shape}, expected {(self.widths[i], fan_in)}")
            if self.biases[i].shape != (self.widths[i],):
                raise ShapeMismatch(f"layer {i}: bias shape {self.biases[i].shape}")
            fan_in = self.widths[i]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def copy(self) -> "MlpSpec":
        return MlpSpec(self.input_width, self.widths, self.activations,
                       [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(input_width: int, widths, activations, rng) -> MlpSpec:
    """Uniform fan-in initialization, float32 throughout."""
    weights = []
    biases = []
    fan_in = input_width
    for width in widths:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(width, fan_in)).astype(np.float32))
        biases.append(np.zeros(width, dtype=np.float32))
        fan_in = width
    return MlpSpec(input_width, tuple(widths), tuple(activations), weights, biases)


def mlp_forward(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts (in,) or (N, in), returns matching shape."""
    x = np.asarray(x, dtype=np.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != spec.input_width:
        raise ShapeMismatch(f"input width {x.shape[1]}, spec expects {spec.input_width}")
    h = x
    for w, b, act in zip(spec.weights, spec.biases, spec.activations):
        h = h @ w.T + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h[0] if squeeze else h


# ---------------------------------------------------------------------------
# Snapshots


@dataclass(frozen=True)
class ActionSpec:
    beta: float = 0.5  # residual gain
    low: float = -1.0
    high: float = 1.0
    kind: str = "residual"  # "residual": squashed-Gaussian head; "direct": plain regressor

    def to_dict(self) -> dict:
        return {"beta": self.beta, "low": self.low, "high": self.high, "kind": self.kind}

    @classmethod
    def from_dict(cls, doc: dict) -> "ActionSpec":
        return cls(beta=float(doc["beta"]), low=float(doc["low"]),
                   high=float(doc["high"]), kind=doc["kind"])


@dataclass
class PolicySnapshot:
    policy_id: int
    obs_spec: ObsSpec
    action_spec: ActionSpec
    actor: MlpSpec
    content_hash: str = None  # sha256 hex of the serialized container

    def __post_init__(self):
        expected = self.obs_spec.input_width
        if self.actor.input_width != expected:
            raise SpecMismatch(
                f"actor expects input width {self.actor.input_width}, "
                f"observation spec produces {expected}")
        if self.action_spec.kind == "residual" and self.actor.output_width != 4:
            raise SpecMismatch("residual actor must emit mean and log-std per wheel")
        if self.action_spec.kind == "direct" and self.actor.output_width != 2:
            raise SpecMismatch("direct actor must emit one output per wheel")


def new_snapshot(policy_id: int, obs_spec: ObsSpec, action_spec: ActionSpec, seed: int,
                 hidden=(256, 256)) -> PolicySnapshot:
    """Fresh randomly initialized snapshot for the given specs."""
    from .rng import stream

    out = 4 if action_spec.kind == "residual" else 2
    actor = init_mlp(obs_spec.input_width, tuple(hidden) + (out,),
                     ("relu",) * len(hidden) + ("linear",), stream(seed, "policy-init"))
    return PolicySnapshot(policy_id, obs_spec, action_spec, actor)


def _weight_blob(actor: MlpSpec) -> bytes:
    parts = []
    for w, b in zip(actor.weights, actor.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def serialize_snapshot(snap: PolicySnapshot) -> bytes:
    blob = _weight_blob(snap.actor)
    manifest = {
        "format_version": SNAPSHOT_FORMAT_VERSION,
        "policy_id": snap.policy_id,
        "obs_spec": snap.obs_spec.to_dict(),
        "action_spec": snap.action_spec.to_dict(),
        "actor": {
            "input_width": snap.actor.input_width,
            "widths": list(snap.actor.widths),
            "activations": list(snap.actor.activations),
        },
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = len(mbytes).to_bytes(8, "little") + mbytes + blob
    snap.content_hash = hashlib.sha256(data).hexdigest()
    return data


def deserialize_snapshot(data: bytes) -> PolicySnapshot:
    if len(data) < 8:
        raise ParseError("container shorter than its length header", offset=len(data))
    mlen = int.from_bytes(data[0:8], "little")
    if len(data) < 8 + mlen:
        raise ParseError("manifest truncated", offset=len(data))
    try:
        manifest = json.loads(data[8: 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"manifest is not valid JSON: {exc}", offset=8) from exc
    try:
        if manifest["format_version"] != SNAPSHOT_FORMAT_VERSION:
            raise ParseError(f"unsupported format_version {manifest['format_version']}")
        actor_doc = manifest["actor"]
        input_width = int(actor_doc["input_width"])
        widths = tuple(int(w) for w in actor_doc["widths"])
        activations = tuple(actor_doc["activations"])
        expected = 0
        fan_in = input_width
        for width in widths:
            expected += width * fan_in + width
            fan_in = width
        blob = data[8 + mlen:]
        if len(blob) != 4 * expected:
            raise ParseError(
                f"weight blob is {len(blob)} bytes, shapes declare {4 * expected}",
                offset=8 + mlen + min(len(blob), 4 * expected))
        if hashlib.sha256(blob).hexdigest() != manifest["weights_sha256"]:
            raise HashMismatch("weight blob digest does not match the manifest")
        weights = []
        biases = []
        off = 0
        fan_in = input_width
        flat = np.frombuffer(blob, dtype="<f4")
        for width in widths:
            n = width * fan_in
            weights.append(flat[off: off + n].reshape(width, fan_in).copy())
            off += n
            biases.append(flat[off: off + width].copy())
            off += width
            fan_in = width
        snap = PolicySnapshot(
            policy_id=int(manifest["policy_id"]),
            obs_spec=ObsSpec.from_dict(manifest["obs_spec"]),
            action_spec=ActionSpec.from_dict(manifest["action_spec"]),
            actor=MlpSpec(input_width, widths, activations, weights, biases),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest malformed: {exc}") from exc
    snap.content_hash = hashlib.sha256(data).hexdigest()
    return snap


def save_snapshot(snap: PolicySnapshot, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_snapshot(snap))


def load_snapshot(path) -> PolicySnapshot:
    with open(path, "rb") as fh:
        return deserialize_snapshot(fh.read())


# ---------------------------------------------------------------------------
# Action sampling


def log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), computed without catastrophic cancellation."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def _obs_vector(snap: PolicySnapshot, obs) -> np.ndarray:
    vec = obs.vector if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float32)
    if vec.shape != (snap.obs_spec.input_width,):
        raise SpecMismatch(
            f"observation vector shape {vec.shape}, policy expects "
            f"({snap.obs_spec.input_width},)")
    return vec


def actor_head(snap: PolicySnapshot, x: np.ndarray) -> tuple:
    """(mean, log_std) for a residual actor; batch-friendly."""
    out = mlp_forward(snap.actor, x)
    mean, log_std = np.split(out, 2, axis=-1)
    return mean, np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def squashed_gaussian_logprob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log-density of a = tanh(u), u ~ N(mean, exp(log_std)^2), summed over dims."""
    std = np.exp(log_std)
    gauss = -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * math.log(2.0 * math.pi)
    return np.sum(gauss - log_one_minus_tanh_sq(u), axis=-1)


def sample_action(snap: PolicySnapshot, obs, rng=None, deterministic: bool = False) -> tuple:
    """Draw a residual action. Returns (ResidualAction, log_prob).

    Deterministic mode squashes the mean; its log_prob is the density at that
    point. Stochastic mode needs an rng.
    """
    if snap.action_spec.kind != "residual":
        raise SpecMismatch("sample_action applies to residual (stochastic) policies")
    vec = _obs_vector(snap, obs)
    mean, log_std = actor_head(snap, vec)
    if deterministic:
        u = mean
    else:
        if rng is None:
            raise InvalidArgument("stochastic sampling needs an rng")
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    a = np.tanh(u)
    logp = float(squashed_gaussian_logprob(u, mean, log_std))
    return ResidualAction(float(a[0]), float(a[1])), logp


def policy_command(snap: PolicySnapshot, obs, rng=None, deterministic: bool = True) -> WheelCommand:
    """Full pipeline from observation to wheel command for either policy kind."""
    if snap.action_spec.kind == "direct":
        out = mlp_forward(snap.actor, _obs_vector(snap, obs))
        lo, hi = snap.action_spec.low, snap.action_spec.high
        return WheelCommand(float(np.clip(out[0], lo, hi)), float(np.clip(out[1], lo, hi)))
    alpha = obs.alpha if isinstance(obs, Observation) else float(obs[-1])
    base = unicycle_base(alpha)
    residual, _ = sample_action(snap, obs, rng=rng, deterministic=deterministic)
    return compose(base, residual, snap.action_spec.beta)
