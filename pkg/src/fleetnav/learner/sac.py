"""Soft actor-critic on the residual action space, hand-rolled gradients.

Twin critics with Polyak-averaged targets, a squashed-Gaussian actor, and an
auto-tuned entropy temperature. The actor's output layer starts at zero so
the initial deterministic policy is exactly the unicycle prior.

Gradient derivations used below, with u = mu + sigma*eps, a = tanh(u),
T(u) = log(1 - tanh(u)^2) and T'(u) = -2*tanh(u):
    dlogpi/dmu      = -T'(u)              = 2a
    dlogpi/dlogstd  = -1 - T'(u)*sigma*eps = -1 + 2a*sigma*eps
    d(-Q)/dmu       = -dQ/da * (1 - a^2)
    d(-Q)/dlogstd   = -dQ/da * (1 - a^2) * sigma*eps
    dalpha_loss/dlogalpha = -mean(logpi + target_entropy)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from ..policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    ActionSpec,
    MlpSpec,
    PolicySnapshot,
    init_mlp,
    squashed_gaussian_logprob,
)
from ..rng import stream
from ..sim import ObsSpec
from .nets import Adam, ScalarAdam, backward, check_finite, forward_cached, polyak_update


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    warmup_steps: int = 1000  # env steps driven by uniform random actions
    target_entropy: float = -2.0  # -|A| for two wheels
    grad_steps_per_env_step: int = 1
    hidden: tuple = (256, 256)
    init_log_alpha: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise InvalidArgument("gamma must lie in [0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise InvalidArgument("tau must lie in (0, 1]")


class SacLearner:
    def __init__(self, obs_width: int, action_dim: int = 2,
                 cfg: SacConfig = None, seed: int = 0):
        self.cfg = cfg or SacConfig()
        self.obs_width = obs_width
        self.action_dim = action_dim
        rng = stream(seed, "sac-init")
        hidden = tuple(self.cfg.hidden)
        acts = ("relu",) * len(hidden) + ("linear",)
        self.actor = init_mlp(obs_width, hidden + (2 * action_dim,), acts, rng)
        self.actor.weights[-1][:] = 0.0  # start exactly at the unicycle prior
        self.actor.biases[-1][:] = 0.0
        self.q1 = init_mlp(obs_width + action_dim, hidden + (1,), acts, rng)
        self.q2 = init_mlp(obs_width + action_dim, hidden + (1,), acts, rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = float(self.cfg.init_log_alpha)
        lr = self.cfg.lr
        self.actor_opt = Adam(self.actor, lr)
        self.q1_opt = Adam(self.q1, lr)
        self.q2_opt = Adam(self.q2, lr)
        self.alpha_opt = ScalarAdam(lr)
        self.rng = stream(seed, "sac-updates")
        self.update_count = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def _actor_dist(self, obs: np.ndarray) -> tuple:
        out, cache = forward_cached(self.actor, obs)
        mean = out[:, : self.action_dim]
        raw_log_std = out[:, self.action_dim:]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, raw_log_std, cache

    def _sample(self, mean, log_std, eps=None) -> tuple:
        if eps is None:
            eps = self.rng.standard_normal(mean.shape).astype(np.float32)
        std = np.exp(log_std)
        u = mean + std * eps
        a = np.tanh(u)
        logp = squashed_gaussian_logprob(u, mean, log_std)
        return a, u, eps, std, logp

    def act(self, obs_vec: np.ndarray, rng: np.random.Generator = None,
            deterministic: bool = False) -> np.ndarray:
        """Residual action from the live actor, for collection or eval."""
        mean, log_std, _, _ = self._actor_dist(np.asarray(obs_vec, np.float32)[None])
        if deterministic:
            return np.tanh(mean[0])
        draw = (rng or self.rng).standard_normal(mean.shape).astype(np.float32)
        return np.tanh(mean + np.exp(log_std) * draw)[0]

    def critic_grads(self, net: MlpSpec, sa: np.ndarray, y: np.ndarray) -> tuple:
        """Loss and weight gradients of mean((Q(s,a) - y)^2) for one critic."""
        B = len(sa)
        q, cache = forward_cached(net, sa)
        err = q[:, 0] - y
        grads, _ = backward(net, cache, (2.0 * err / B)[:, None])
        return float(np.mean(err ** 2)), grads

    def actor_grads(self, obs: np.ndarray, eps: np.ndarray = None) -> tuple:
        """Loss and weight gradients of mean(alpha*logpi - Qmin) via reparameterization.

        eps fixes the Gaussian draw (for gradient checking); None samples it.
        Returns (loss, grads, logp, q_min_per_sample).
        """
        B = len(obs)
        mean, log_std, raw_log_std, actor_cache = self._actor_dist(obs)
        a, u, eps_draw, std, logp = self._sample(mean, log_std, eps)
        sa_pi = np.concatenate([obs, a], axis=1)
        q1_pi, c1 = forward_cached(self.q1, sa_pi)
        q2_pi, c2 = forward_cached(self.q2, sa_pi)
        use_q1 = (q1_pi[:, 0] <= q2_pi[:, 0]).astype(np.float32)[:, None]
        _, gin1 = backward(self.q1, c1, use_q1)
        _, gin2 = backward(self.q2, c2, 1.0 - use_q1)
        dq_da = (gin1 + gin2)[:, self.obs_width:]  # dQmin/da, (B, A)

        one_minus_a2 = 1.0 - a * a
        sig_eps = std * eps_draw
        g_mean = (self.alpha * 2.0 * a - dq_da * one_minus_a2) / B
        g_log_std = (self.alpha * (-1.0 + 2.0 * a * sig_eps)
                     - dq_da * one_minus_a2 * sig_eps) / B
        # No gradient through the clamp where it is active.
        in_range = ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX))
        g_log_std = g_log_std * in_range
        grad_out = np.concatenate([g_mean, g_log_std], axis=1)
        grads, _ = backward(self.actor, actor_cache, grad_out)
        q_min = np.minimum(q1_pi[:, 0], q2_pi[:, 0])
        loss = float(np.mean(self.alpha * logp - q_min))
        return loss, grads, logp, q_min

    def td_target(self, rewards: np.ndarray, next_obs: np.ndarray,
                  done: np.ndarray, eps: np.ndarray = None) -> np.ndarray:
        """y = r + gamma*(1-done)*(min target Q(s', a') - alpha*logpi(a'|s'))."""
        mean_n, log_std_n, _, _ = self._actor_dist(next_obs)
        a_next, _, _, _, logp_next = self._sample(mean_n, log_std_n, eps)
        sa_next = np.concatenate([next_obs, a_next], axis=1)
        q1_next, _ = forward_cached(self.q1_target, sa_next)
        q2_next, _ = forward_cached(self.q2_target, sa_next)
        q_next = np.minimum(q1_next[:, 0], q2_next[:, 0]) - self.alpha * logp_next
        return rewards + self.cfg.gamma * (1.0 - done) * q_next

    def update(self, batch: dict) -> dict:
        """One gradient step on critics, actor, and temperature."""
        cfg = self.cfg
        obs = batch["obs"]
        actions = batch["actions"]
        rewards = batch["rewards"]
        next_obs = batch["next_obs"]
        done = batch["done"]

        y = self.td_target(rewards, next_obs, done)
        sa = np.concatenate([obs, actions], axis=1)
        q_losses = []
        for net, opt in ((self.q1, self.q1_opt), (self.q2, self.q2_opt)):
            loss, grads = self.critic_grads(net, sa, y)
            q_losses.append(loss)
            opt.step(net, grads)

        # Actor: ascend min-twin Q with entropy bonus, reparameterized.
        actor_loss, actor_grads, logp, q_pi = self.actor_grads(obs)
        self.actor_opt.step(self.actor, actor_grads)

        # Temperature follows the usual detached-entropy objective.
        grad_log_alpha = -float(np.mean(logp + cfg.target_entropy))
        self.log_alpha = self.alpha_opt.step(self.log_alpha, grad_log_alpha)

        polyak_update(self.q1_target, self.q1, cfg.tau)
        polyak_update(self.q2_target, self.q2, cfg.tau)
        self.update_count += 1

        diag = {
            "q1_loss": q_losses[0],
            "q2_loss": q_losses[1],
            "actor_loss": actor_loss,
            "alpha": self.alpha,
            "entropy": float(-np.mean(logp)),
            "q_mean": float(np.mean(q_pi)),
            "target_mean": float(np.mean(y)),
        }
        check_finite("sac_update", np.array(list(diag.values())))
        for w in self.actor.weights + self.q1.weights + self.q2.weights:
            check_finite("sac_update weights", w)
        return diag

    def snapshot(self, policy_id: int, obs_spec: ObsSpec,
                 action_spec: ActionSpec = None) -> PolicySnapshot:
        return PolicySnapshot(
            policy_id=policy_id,
            obs_spec=obs_spec,
            action_spec=action_spec or ActionSpec(),
            actor=self.actor.copy(),
        )

    def load_actor(self, snap: PolicySnapshot) -> None:
        """Adopt a snapshot's actor weights (finetuning from a checkpoint)."""
        if snap.actor.input_width != self.obs_width:
            raise InvalidArgument("snapshot input width does not match learner")
        self.actor = snap.actor.copy()
        self.actor_opt = Adam(self.actor, self.cfg.lr)

    # ------------------------------------------------------------------
    # checkpointing

    def save_state(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        meta = {
            "format_version": 1,
            "obs_width": self.obs_width,
            "action_dim": self.action_dim,
            "log_alpha": self.log_alpha,
            "update_count": self.update_count,
            "hidden": list(self.cfg.hidden),
        }
        with open(os.path.join(directory, "learner.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        arrays = {}
        for name, net in (("actor", self.actor), ("q1", self.q1), ("q2", self.q2),
                          ("q1_target", self.q1_target), ("q2_target", self.q2_target)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                arrays[f"{name}_w{i}"] = w
                arrays[f"{name}_b{i}"] = b
        np.savez_compressed(os.path.join(directory, "weights.npz"), **arrays)

    def restore_state(self, directory) -> None:
        with open(os.path.join(directory, "learner.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        self.log_alpha = float(meta["log_alpha"])
        self.update_count = int(meta["update_count"])
        with np.load(os.path.join(directory, "weights.npz")) as data:
            for name, net in (("actor", self.actor), ("q1", self.q1), ("q2", self.q2),
                              ("q1_target", self.q1_target), ("q2_target", self.q2_target)):
                for i in range(len(net.weights)):
                    net.weights[i][:] = data[f"{name}_w{i}"]
                    net.biases[i][:] = data[f"{name}_b{i}"]
