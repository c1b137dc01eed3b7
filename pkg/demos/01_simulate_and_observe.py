"""
Driving the simulator and reading its sensors
=============================================

Reset an episode in a procedurally generated apartment, drive the robot
with a constant wheel command, and look at what the onboard sensors
report along the way.
"""

import numpy as np

from fleetnav.procgen import GenConfig, generate_layout
from fleetnav.sim import (SimConfig, WheelCommand, boundary_observation,
                          depth_rays_observation, reset, step)

# A small two-room apartment. The same seed always yields the same layout.
layout = generate_layout(GenConfig(room_count_range=(2, 2)), seed=7)
print("rooms:", len(layout.rooms), " doors:", len(layout.doors),
      " obstacles:", len(layout.obstacles))
print("start:", np.round(layout.start_pose, 3), " goal:",
      np.round(layout.goal_position, 3))

config = SimConfig()
state, obs = reset(layout, config, seed=0)

# The observation is a fixed-width vector: goal distance and heading error
# plus one row of sensor features per history frame, oldest first.
print("\nobservation vector width:", obs.vector.shape[0])
print("goal distance (normalized):", round(obs.goal_distance, 4))
print("heading error alpha (rad):", round(obs.alpha, 4))

# Drive gently forward-left for two seconds of sim time.
cmd = WheelCommand(tau_l=0.4, tau_r=0.6)
for _ in range(20):
    state, obs, event = step(state, cmd)
    if event != "none":
        break

print("\nafter", state.step_count, "steps, event:", event)
print("true pose:", np.round([state.pose_true.x, state.pose_true.y,
                              state.pose_true.theta], 3))
print("estimated pose:", np.round([state.pose_est.x, state.pose_est.y,
                                   state.pose_est.theta], 3))

# The two sensor heads can also be queried directly. The boundary camera
# reports, per image column, the row where the floor meets the nearest
# obstacle, normalized by image height: nearer walls sit lower (higher v).
rows_v = boundary_observation(state)
print("\nboundary rows (first 5 of", rows_v.shape[0], "columns):",
      np.round(rows_v[:5], 3))

# The depth head casts a fan of rays and returns normalized ranges.
ranges = depth_rays_observation(state, n_rays=11)
print("depth rays:", np.round(ranges, 3))
