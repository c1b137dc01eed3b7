"""
From episode logs to training transitions
=========================================

Episodes are recorded as logs, rewards are assigned after the fact from
the terminal event alone, and the resulting transitions land in a replay
buffer ready for off-policy updates.
"""

import numpy as np

from fleetnav.evaluation import unicycle_snapshot
from fleetnav.learner.replay import ReplayBuffer
from fleetnav.learner.rewards import RewardConfig, assign_rewards
from fleetnav.logs import dump_episode_log, parse_episode_log
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.rollout import run_episode
from fleetnav.sim import ObsSpec, SimConfig

config = SimConfig()
layout = generate_layout(GenConfig(room_count_range=(1, 1)), seed=3)

# Roll one episode with the analytic base policy and serialize it the way
# a worker would before uploading.
snap = unicycle_snapshot(config.obs)
log = run_episode(layout, config, snap, seed=5, worker_id="demo")
text = dump_episode_log(log)
print("log size:", len(text), "bytes,", len(log.steps), "steps,",
      "reason:", log.stop_reason)

# Logs survive the wire format byte for byte.
again = parse_episode_log(text)
print("round-trip steps match:", len(again.steps) == len(log.steps))

# The default reward adds progress shaping and a small time penalty on
# every step, plus a terminal bonus that depends on how the run ended.
traj = assign_rewards(again, RewardConfig())
print("\nshaped reward sum:", round(float(traj.rewards.sum()), 4))
print("discount at terminal:", float(traj.discounts[-1]))

# sparse_mode strips the shaping: the return is exactly the terminal
# constant, so credit assignment rests entirely on the bootstrap.
sparse = assign_rewards(again, RewardConfig(sparse_mode=True))
print("sparse reward sum:", float(sparse.rewards.sum()))
print("non-zero sparse rewards:", int(np.count_nonzero(sparse.rewards)))

# The trajectory has N+1 entries for N transitions; the buffer slices it
# into (obs, action, reward, next_obs, done) rows.
buf = ReplayBuffer(traj.observations.shape[1], capacity=10_000)
buf.push(traj)
print("\nbuffer size:", buf.size, "(transitions from", len(log.steps), "steps)")

batch = buf.sample(8, np.random.default_rng(0))
print("batch keys:", sorted(batch.keys()))
print("obs block:", batch["obs"].shape, " done flags:",
      batch["done"].astype(int).tolist())
