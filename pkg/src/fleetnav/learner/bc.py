"""Behavior cloning baseline: regress wheel commands directly from observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from ..policy import ActionSpec, PolicySnapshot, init_mlp, mlp_forward
from ..rng import stream
from ..sim import ObsSpec
from .nets import Adam, backward, check_finite, forward_cached


@dataclass(frozen=True)
class BcConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    hidden: tuple = (256, 256)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("bc config values must be positive")


class BcLearner:
    """MSE regression onto demonstrated wheel commands.

    The cloned policy is a direct-command policy: its two outputs are clipped
    to [-1, 1] at inference time rather than composed with the unicycle prior.
    """

    def __init__(self, obs_width: int, action_dim: int = 2,
                 cfg: BcConfig = None, seed: int = 0):
        self.cfg = cfg or BcConfig()
        self.obs_width = obs_width
        self.action_dim = action_dim
        rng = stream(seed, "bc-init")
        hidden = tuple(self.cfg.hidden)
        acts = ("relu",) * len(hidden) + ("linear",)
        self.net = init_mlp(obs_width, hidden + (action_dim,), acts, rng)
        self.opt = Adam(self.net, self.cfg.lr)
        self.rng = stream(seed, "bc-train")

    def fit(self, observations: np.ndarray, actions: np.ndarray,
            log_every: int = 0, log_fn=None) -> list:
        """Run the configured epochs of minibatch MSE; returns per-epoch losses."""
        obs = np.asarray(observations, np.float32)
        acts = np.asarray(actions, np.float32)
        if len(obs) != len(acts):
            raise InvalidArgument("observations and actions must align")
        if len(obs) == 0:
            raise InvalidArgument("no demonstrations to fit")
        n = len(obs)
        bs = min(self.cfg.batch_size, n)
        losses = []
        for epoch in range(self.cfg.epochs):
            order = self.rng.permutation(n)
            epoch_loss = 0.0
            batches = 0
            for start in range(0, n - bs + 1, bs):
                idx = order[start:start + bs]
                x, target = obs[idx], acts[idx]
                pred, cache = forward_cached(self.net, x)
                err = pred - target
                loss = float(np.mean(err ** 2))
                grads, _ = backward(self.net, cache,
                                    (2.0 * err / err.size).astype(np.float32))
                self.opt.step(self.net, grads)
                epoch_loss += loss
                batches += 1
            losses.append(epoch_loss / max(batches, 1))
            check_finite("bc_fit", np.array(losses[-1:]))
            if log_every and log_fn and (epoch + 1) % log_every == 0:
                log_fn(epoch + 1, losses[-1])
        return losses

    def predict(self, obs: np.ndarray) -> np.ndarray:
        out = mlp_forward(self.net, np.asarray(obs, np.float32))
        return np.clip(out, -1.0, 1.0)

    def snapshot(self, policy_id: int, obs_spec: ObsSpec) -> PolicySnapshot:
        return PolicySnapshot(
            policy_id=policy_id,
            obs_spec=obs_spec,
            action_spec=ActionSpec(kind="direct"),
            actor=self.net.copy(),
        )
