"""Policy evaluation: SR/GD/CR metrics, benchmark suites, layout ablation.

Three metrics per policy: success rate (percent of episodes ending in
goal_reached), mean final goal distance in meters, and collision rate.
Goal distance averages over ALL episodes by default, successes included;
a failures-only mean is reported alongside for comparison.

Suites are deterministic layout lists built from seed bases:

  suite_empty         single free rooms; the straight start-goal line is
                      always walkable, so the plain heading controller
                      should succeed everywhere
  suite_light_clutter single rooms with one or two small obstacles off the
                      direct line
  suite_blocked_line  a pillar sits astride the start-goal segment, so any
                      policy that just drives at the goal must hit it

Reports render as JSON and as an aligned text table (SR^ GDv CRv).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InvalidArgument
from .logs import EpisodeLog
from .policy import ActionSpec, PolicySnapshot, new_snapshot
from .procgen import GenConfig, LayoutSpec, Obstacle, generate_layout, validate_layout
from .rng import stream
from .rollout import run_episode
from .sim import STOP_REASONS, ObsSpec, SimConfig

SUCCESS_REASON = "goal_reached"
COLLISION_REASON = "collision"


@dataclass(frozen=True)
class EpisodeOutcome:
    stop_reason: str
    final_goal_distance: float  # meters, ground truth when available
    steps: int
    layout_seed: int

    def __post_init__(self):
        if self.stop_reason not in STOP_REASONS:
            raise InvalidArgument(f"unknown stop reason {self.stop_reason!r}")
        if self.final_goal_distance < 0:
            raise InvalidArgument("final goal distance cannot be negative")

    @property
    def success(self) -> bool:
        return self.stop_reason == SUCCESS_REASON


@dataclass
class MetricsReport:
    success_rate: float  # percent
    goal_distance: float  # meters, mean over every episode
    collision_rate: float  # percent
    episode_count: int
    per_layout: dict = field(default_factory=dict)
    goal_distance_failures: float = None  # mean over failures, None if all succeed

    def __post_init__(self):
        if self.success_rate + self.collision_rate > 100.0 + 1e-9:
            raise InvalidArgument("SR + CR cannot exceed 100")
        if self.goal_distance < 0:
            raise InvalidArgument("GD cannot be negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(**{k: doc[k] for k in
                      ("success_rate", "goal_distance", "collision_rate",
                       "episode_count", "per_layout", "goal_distance_failures")
                      if k in doc})


def _aggregate(outcomes) -> tuple:
    n = len(outcomes)
    successes = sum(1 for o in outcomes if o.success)
    collisions = sum(1 for o in outcomes if o.stop_reason == COLLISION_REASON)
    gd_all = float(np.mean([o.final_goal_distance for o in outcomes]))
    failures = [o.final_goal_distance for o in outcomes if not o.success]
    gd_fail = float(np.mean(failures)) if failures else None
    return (100.0 * successes / n, gd_all, 100.0 * collisions / n, n, gd_fail)


def compute_metrics(outcomes: list) -> MetricsReport:
    """SR/GD/CR plus a per-layout breakdown from raw episode outcomes."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyInput("no outcomes to aggregate")
    sr, gd, cr, n, gd_fail = _aggregate(outcomes)
    per_layout = {}
    for seed in sorted({o.layout_seed for o in outcomes}):
        subset = [o for o in outcomes if o.layout_seed == seed]
        ssr, sgd, scr, sn, _ = _aggregate(subset)
        per_layout[seed] = {"success_rate": ssr, "goal_distance": sgd,
                            "collision_rate": scr, "episode_count": sn}
    return MetricsReport(success_rate=sr, goal_distance=gd, collision_rate=cr,
                         episode_count=n, per_layout=per_layout,
                         goal_distance_failures=gd_fail)


def outcome_from_log(log: EpisodeLog) -> EpisodeOutcome:
    """Final ground-truth goal distance, falling back to the estimate."""
    last = log.steps[-1]
    pose = last.pose_true if last.pose_true is not None else last.pose_est
    distance = math.hypot(log.goal[0] - pose[0], log.goal[1] - pose[1])
    return EpisodeOutcome(stop_reason=log.stop_reason,
                          final_goal_distance=distance,
                          steps=len(log.steps),
                          layout_seed=log.layout_seed)


def run_suite(snapshot: PolicySnapshot, suite: list, config: SimConfig,
              trials: int = 10, seed: int = 0) -> MetricsReport:
    """Evaluate with deterministic (mean) actions, `trials` per layout.

    Episode seeds derive from (seed, layout, trial) alone, so the report is
    identical for the same arguments no matter the execution order, and the
    policy is never written to.
    """
    outcomes = []
    for layout in suite:
        for trial in range(trials):
            rng = stream(seed, "eval", str(layout.seed), str(trial))
            episode_seed = int(rng.integers(2 ** 62))
            log = run_episode(layout, config, snapshot, seed=episode_seed,
                              stochastic=False, worker_id="eval")
            outcomes.append(outcome_from_log(log))
    return compute_metrics(outcomes)


# --------------------------------------------------------------------- suites


def eval_config(config: SimConfig = None) -> SimConfig:
    """Benchmark variant of a sim config: tracking dropout disabled.

    A random odometry loss ends the episode regardless of what the policy
    did, so leaving it on measures the dropout rate, not the controller.
    Actuation and estimation noise stay as configured.
    """
    config = config or SimConfig()
    return dataclasses.replace(
        config,
        estimation=dataclasses.replace(config.estimation, loss_p0=0.0, loss_k=0.0))


def unicycle_snapshot(obs_spec: ObsSpec, policy_id: int = 0) -> PolicySnapshot:
    """Residual policy with a zeroed head: acts as the plain heading law."""
    snap = new_snapshot(policy_id, obs_spec, ActionSpec(kind="residual"), seed=0)
    snap.actor.weights[-1][:] = 0.0
    snap.actor.biases[-1][:] = 0.0
    return snap


def _empty_room_config() -> GenConfig:
    return GenConfig(room_count_range=(1, 1), room_size_range=(4.0, 5.5),
                     obstacle_count_range=(0, 0))


def suite_empty(n: int, seed_base: int = 0) -> list:
    """Single rooms, no obstacles: the direct line is always free."""
    if n < 1:
        raise InvalidArgument("suite size must be >= 1")
    return [generate_layout(_empty_room_config(), seed_base + i)
            for i in range(n)]


def suite_light_clutter(n: int, seed_base: int = 0) -> list:
    """Single rooms with one or two small obstacles."""
    if n < 1:
        raise InvalidArgument("suite size must be >= 1")
    config = GenConfig(room_count_range=(1, 1), room_size_range=(4.0, 5.5),
                       obstacle_count_range=(1, 2),
                       obstacle_size_range=(0.3, 0.5))
    return [generate_layout(config, seed_base + i) for i in range(n)]


BLOCKER_RADIUS = 0.45


def suite_blocked_line(n: int, seed_base: int = 0) -> list:
    """A pillar on the start-goal midpoint: straight driving must collide.

    Candidate empty rooms are filtered so the pillar keeps the required
    clearance from start, goal, and walls, and the layout stays solvable
    by going around. Seeds are consumed in order from seed_base, so the
    suite is deterministic.
    """
    if n < 1:
        raise InvalidArgument("suite size must be >= 1")
    config = _empty_room_config()
    suite = []
    seed = seed_base
    while len(suite) < n:
        candidate = generate_layout(config, seed)
        seed += 1
        start = np.asarray(candidate.start_pose[:2])
        goal = np.asarray(candidate.goal_position)
        if np.linalg.norm(goal - start) < 2.3:
            continue
        mid = 0.5 * (start + goal)
        room = candidate.rooms[0]
        wall_margin = min(mid[0] - room[0], mid[1] - room[1],
                          room[2] - mid[0], room[3] - mid[1])
        if wall_margin < BLOCKER_RADIUS + 0.75:
            continue  # leave a passable corridor on every side
        blocker = Obstacle(shape="cylinder", center=(float(mid[0]), float(mid[1])),
                           radius=BLOCKER_RADIUS)
        blocked = dataclasses.replace(
            candidate, obstacles=candidate.obstacles + (blocker,))
        if validate_layout(blocked).violations:
            continue
        suite.append(blocked)
    return suite


# ------------------------------------------------------------------- ablation


def ablation_layout_count(pool_sizes, *, gen_config: GenConfig,
                          sim_config: SimConfig, eval_suite: list,
                          budget_episodes: int, seed: int = 0,
                          trials: int = 10, sac_cfg=None, reward_cfg=None,
                          on_size=None) -> list:
    """Train one policy per pool size under the same budget; report held-out SR.

    Pool i draws layouts from its own million-wide seed band, so the pools
    are disjoint from each other and from any sane eval-suite base.
    """
    sizes = list(pool_sizes)
    if any(s < 1 for s in sizes):
        raise InvalidArgument("pool sizes must be >= 1")
    if sizes != sorted(sizes):
        raise InvalidArgument("pool sizes must be ascending")

    from .learner import pretrain  # deferred: keeps import acyclic

    results = []
    for i, size in enumerate(sizes):
        base = 1_000_000 * (i + 1) + seed
        pool = [generate_layout(gen_config, base + j) for j in range(size)]
        trained = pretrain(pool, sim_config, sac_cfg=sac_cfg,
                           max_episodes=budget_episodes, seed=seed + i,
                           reward_cfg=reward_cfg)
        snapshot = trained.learner.snapshot(policy_id=i + 1,
                                            obs_spec=sim_config.obs)
        report = run_suite(snapshot, eval_suite, sim_config,
                           trials=trials, seed=seed)
        results.append({"pool_size": size, "report": report,
                        "success_rate": report.success_rate})
        if on_size is not None:
            on_size(size, report)
    return results


def sr_trend(results: list, slack: float = 5.0) -> dict:
    """Is held-out SR non-decreasing in pool size, within `slack` points?"""
    rates = [r["success_rate"] for r in results]
    ok = all(rates[i + 1] >= rates[i] - slack for i in range(len(rates) - 1))
    return {"success_rates": rates, "slack": slack, "non_decreasing": ok}


# ------------------------------------------------------------------ rendering


def render_table(rows: dict) -> str:
    """Aligned text table of reports, one row per policy (SR↑ GD↓ CR↓)."""
    if not rows:
        raise EmptyInput("no reports to render")
    header = ("policy", "SR↑", "GD↓", "CR↓", "episodes")
    body = []
    for name, report in rows.items():
        body.append((str(name),
                     f"{report.success_rate:.1f}",
                     f"{report.goal_distance:.2f}",
                     f"{report.collision_rate:.1f}",
                     str(report.episode_count)))
    widths = [max(len(header[c]), *(len(r[c]) for r in body))
              for c in range(len(header))]
    lines = []
    for row in (header, *body):
        left = row[0].ljust(widths[0])
        rest = "  ".join(row[c].rjust(widths[c]) for c in range(1, len(header)))
        lines.append(f"{left}  {rest}".rstrip())
    return "\n".join(lines) + "\n"
