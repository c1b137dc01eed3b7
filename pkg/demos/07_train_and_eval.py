"""
Pretraining a residual policy and scoring it on held-out suites
===============================================================

A miniature version of the full training run: a few hundred episodes on
a small layout pool, then a side-by-side evaluation against the analytic
base controller. Takes a minute or two on one core.
"""

from fleetnav.evaluation import (render_table, run_suite, suite_empty,
                                 unicycle_snapshot)
from fleetnav.learner import pretrain
from fleetnav.learner.sac import SacConfig
from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.sim import SimConfig

config = SimConfig()

# Tiny pool of single-room layouts. Real runs use dozens of layouts and
# thousands of episodes; the shape of the loop is identical.
gen = GenConfig(room_count_range=(1, 1), obstacle_count_range=(0, 1))
pool = [generate_layout(gen, 2_000 + i) for i in range(4)]

# Small networks keep this demo quick. warmup_steps is how many
# transitions are collected before gradient updates begin.
sac = SacConfig(hidden=(32, 32), warmup_steps=500)
result = pretrain(pool, config, sac_cfg=sac, max_episodes=150, seed=0)

print("episodes:", result.episodes, " env steps:", result.env_steps,
      " updates:", result.updates, " stop:", result.stop_reason)
recent = result.successes[-50:]
print("success rate over last 50 episodes:",
      round(100.0 * sum(recent) / len(recent), 1))

# Held-out evaluation: same generator family, disjoint seeds, and a
# deterministic policy (no exploration noise). On easy rooms the residual
# should at least preserve the base controller's behaviour; gains show up
# on harder suites after much longer training.
suite = suite_empty(6, seed_base=9_000)
trained = run_suite(result.learner.snapshot(policy_id=1, obs_spec=config.obs),
                    suite, config, trials=3, seed=7)
baseline = run_suite(unicycle_snapshot(config.obs), suite, config,
                     trials=3, seed=7)

print()
print(render_table({"unicycle": baseline, "sac-residual": trained}))
