"""
Scripted expert demonstrations and behaviour cloning
====================================================

A privileged expert (it reads the true map) produces demonstrations, and
a behaviour-cloning learner regresses onto its wheel commands. Useful as
a baseline: strong where demos are plentiful, brittle elsewhere.
"""

import numpy as np

from fleetnav.evaluation import render_table, run_suite, suite_empty
from fleetnav.expert import collect_expert_dataset, run_expert_episode
from fleetnav.learner.bc import BcConfig, BcLearner
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.sim import SimConfig

config = SimConfig()

# One expert episode, just to see it work. The expert steers toward the
# goal while being pushed away from nearby walls and obstacles.
layout = generate_layout(GenConfig(room_count_range=(1, 1)), seed=4_000)
log = run_expert_episode(layout, config, seed=0)
print("expert episode:", len(log.steps), "steps, reason:", log.stop_reason)

# Collect a small demonstration set. Each row pairs the observation
# vector the robot saw with the command the expert issued; episodes that
# fail to reach the goal are dropped.
demo_layouts = [generate_layout(GenConfig(room_count_range=(1, 1)), 4_000 + i)
                for i in range(6)]
X, Y, demo_logs = collect_expert_dataset(demo_layouts, config,
                                         episodes=30, seed=41)
print("dataset:", X.shape[0], "pairs from", len(demo_logs), "episodes,",
      "obs width", X.shape[1])

# Fit the cloner. Loss is plain MSE on the wheel commands.
bc = BcLearner(X.shape[1], cfg=BcConfig(hidden=(32, 32), epochs=20), seed=41)
losses = bc.fit(X, Y)
print("loss: first epoch %.4f -> last epoch %.4f" % (losses[0], losses[-1]))

pred = bc.predict(X[:3])
print("sample predictions vs expert:")
for p, y in zip(pred, Y[:3]):
    print("  ", np.round(p, 3), "vs", np.round(y, 3))

# Score it on held-out easy rooms.
suite = suite_empty(5, seed_base=4_500)
report = run_suite(bc.snapshot(policy_id=1, obs_spec=config.obs),
                   suite, config, trials=3, seed=3)
print()
print(render_table({"bc-clone": report}))
