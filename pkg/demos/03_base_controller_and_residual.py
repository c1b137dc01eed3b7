"""
The analytic base controller and the residual that learns on top
================================================================

The base policy is a closed-form unicycle steering law: given the heading
error alpha it produces wheel commands that turn toward the goal. The
learned policy never replaces it; it adds a bounded residual.
"""

import numpy as np

from fleetnav.policy import ResidualAction, compose, unicycle_base

# At alpha = 0 the robot is facing the goal and both wheels drive equally.
straight = unicycle_base(0.0)
print("alpha=0:      v_l=%.4f v_r=%.4f" % (straight.v_l, straight.v_r))

# A positive heading error (goal to the left) slows the left wheel.
left = unicycle_base(np.pi / 4)
print("alpha=pi/4:   v_l=%.4f v_r=%.4f" % (left.v_l, left.v_r))

# Facing directly away, the wheels counter-rotate to spin in place.
about = unicycle_base(np.pi)
print("alpha=pi:     v_l=%.4f v_r=%.4f" % (about.v_l, about.v_r))

# The commands always stay inside the unit box.
alphas = np.linspace(-np.pi, np.pi, 721)
cmds = np.array([[unicycle_base(a).v_l, unicycle_base(a).v_r]
                 for a in alphas])
print("\nmax |command| over a full sweep:", np.abs(cmds).max())

# compose() blends a residual into the base command with gain beta and
# clamps the result, so a bad residual can slow the robot down but cannot
# saturate it into a spin.
base = unicycle_base(0.3)
res = ResidualAction(dv_l=0.9, dv_r=-0.9)
blended = compose(base, res, beta=0.5)
print("\nbase:     (%.4f, %.4f)" % (base.v_l, base.v_r))
print("residual: (%.1f, %.1f) at beta=0.5" % (res.dv_l, res.dv_r))
print("blended:  (%.4f, %.4f)" % (blended.tau_l, blended.tau_r))

# A zero residual leaves the base behaviour untouched, which is exactly
# the state of a freshly initialized actor network.
zero = compose(base, ResidualAction(0.0, 0.0), beta=0.5)
print("zero residual reproduces base:",
      (zero.tau_l, zero.tau_r) == (base.v_l, base.v_r))
