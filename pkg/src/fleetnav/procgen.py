"""Procedural indoor layouts: gridded rooms, doors, obstacles, start/goal.

Layouts are deterministic functions of (config, seed): all sampling goes
through one named Philox stream, so regeneration is bit-identical. Rooms
tile a grid with shared walls; doors are gaps centered on shared wall
segments; obstacles are boxes or cylinders placed fully inside rooms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationFailed, InvalidArgument, ParseError
from .geometry import StaticWorld, box_point_distance, grid_connected, occupancy_grid, point_in_rooms
from .rng import stream

LAYOUT_FORMAT_VERSION = 1
MIN_START_GOAL_DISTANCE = 2.0  # hard floor on start-goal separation, meters
_WALL_MARGIN = 0.2  # door gaps keep this much wall on each side
_OBSTACLE_WALL_MARGIN = 0.15


@dataclass(frozen=True)
class Obstacle:
    shape: str  # "box" | "cylinder"
    center: tuple  # (x, y)
    half_extents: tuple = None  # (hx, hy) for boxes
    radius: float = None  # for cylinders

    def __post_init__(self):
        if self.shape not in ("box", "cylinder"):
            raise InvalidArgument(f"unknown obstacle shape {self.shape!r}")
        if self.shape == "box" and (self.half_extents is None or min(self.half_extents) <= 0):
            raise InvalidArgument("box obstacle needs positive half_extents")
        if self.shape == "cylinder" and (self.radius is None or self.radius <= 0):
            raise InvalidArgument("cylinder obstacle needs positive radius")


@dataclass(frozen=True)
class LayoutSpec:
    seed: int
    rooms: tuple  # of (x0, y0, x1, y1)
    doors: tuple  # of (x1, y1, x2, y2)
    obstacles: tuple  # of Obstacle
    start_pose: tuple  # (x, y, theta)
    goal_position: tuple  # (x, y)
    clearance: float = 0.4  # free margin guaranteed around start/goal

    def world(self) -> StaticWorld:
        return layout_world(self)


@dataclass(frozen=True)
class GenConfig:
    room_count_range: tuple = (1, 3)
    room_size_range: tuple = (2.5, 4.5)
    door_width_range: tuple = (0.7, 1.1)
    obstacle_count_range: tuple = (0, 3)
    obstacle_size_range: tuple = (0.3, 0.7)
    min_start_goal_distance: float = 2.0
    clearance: float = 0.4
    max_attempts: int = 1000

    def __post_init__(self):
        for name in ("room_count_range", "room_size_range", "door_width_range",
                     "obstacle_count_range", "obstacle_size_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidArgument(f"{name} is empty: {lo} > {hi}")
        if self.room_count_range[0] < 1:
            raise InvalidArgument("room_count_range must start at >= 1")
        if self.min_start_goal_distance < MIN_START_GOAL_DISTANCE:
            raise InvalidArgument(
                f"min_start_goal_distance below the {MIN_START_GOAL_DISTANCE} m floor")


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


class _Budget:
    def __init__(self, cap):
        self.left = cap

    def spend(self):
        self.left -= 1
        if self.left < 0:
            raise GenerationFailed("attempt budget exhausted; config is over-constrained")


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _choose_cells(rng, count):
    """Connected set of `count` grid cells grown from a random seed cell."""
    gw = int(np.ceil(np.sqrt(count)))
    gh = int(np.ceil(count / gw))
    start = (int(rng.integers(gw)), int(rng.integers(gh)))
    cells = {start}
    while len(cells) < count:
        frontier = []
        for cx, cy in sorted(cells):
            for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
                if 0 <= nx < gw and 0 <= ny < gh and (nx, ny) not in cells:
                    frontier.append((nx, ny))
        cells.add(frontier[int(rng.integers(len(frontier)))])
    return sorted(cells), gw, gh


def generate_layout(config: GenConfig, seed: int) -> LayoutSpec:
    """Deterministically generate one layout satisfying all invariants.

    Raises GenerationFailed when rejection sampling exceeds the attempt cap.
    """
    rng = stream(seed, "procgen")
    budget = _Budget(config.max_attempts)

    room_count = int(rng.integers(config.room_count_range[0], config.room_count_range[1] + 1))
    cells, gw, gh = _choose_cells(rng, room_count)
    col_w = [_uniform(rng, *config.room_size_range) for _ in range(gw)]
    row_h = [_uniform(rng, *config.room_size_range) for _ in range(gh)]
    xs = np.concatenate([[0.0], np.cumsum(col_w)])
    ys = np.concatenate([[0.0], np.cumsum(row_h)])
    rooms = tuple(
        (float(xs[cx]), float(ys[cy]), float(xs[cx + 1]), float(ys[cy + 1])) for cx, cy in cells
    )

    doors = _place_doors(rng, config, cells, xs, ys)

    for _ in range(config.max_attempts):
        budget.spend()
        try:
            obstacles = _place_obstacles(rng, config, rooms)
            start_pose, goal = _place_start_goal(rng, config, rooms, doors, obstacles, budget)
        except _Retry:
            continue
        layout = LayoutSpec(
            seed=int(seed),
            rooms=rooms,
            doors=doors,
            obstacles=obstacles,
            start_pose=start_pose,
            goal_position=goal,
            clearance=float(config.clearance),
        )
        # Robot-sized corridor from start to goal must exist.
        world = layout.world()
        grid, origin = occupancy_grid(world, cell=0.05, inflate=0.16)
        if grid_connected(grid, origin, 0.05,
                          np.asarray(start_pose[:2]), np.asarray(goal)):
            return layout
    raise GenerationFailed("attempt budget exhausted; config is over-constrained")


class _Retry(Exception):
    pass


def _place_doors(rng, config, cells, xs, ys):
    cellset = set(cells)
    edges = []
    for cx, cy in cells:
        if (cx + 1, cy) in cellset:
            edges.append(((cx, cy), (cx + 1, cy)))
        if (cx, cy + 1) in cellset:
            edges.append(((cx, cy), (cx, cy + 1)))
    # Randomized spanning tree keeps every room reachable; extra doors add loops.
    order = list(rng.permutation(len(edges)))
    parent = {c: c for c in cells}

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    chosen = []
    extra = []
    for i in order:
        a, b = edges[i]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            chosen.append(edges[i])
        else:
            extra.append(edges[i])
    for e in extra:
        if rng.random() < 0.5:
            chosen.append(e)

    doors = []
    for (ax, ay), (bx, by) in chosen:
        if bx == ax + 1:  # vertical shared wall at xs[bx]
            x = float(xs[bx])
            lo, hi = float(ys[ay]), float(ys[ay + 1])
            span = hi - lo - 2 * _WALL_MARGIN
            w = min(_uniform(rng, *config.door_width_range), span)
            mid = (lo + hi) / 2.0
            doors.append((x, mid - w / 2.0, x, mid + w / 2.0))
        else:  # horizontal shared wall at ys[by]
            y = float(ys[by])
            lo, hi = float(xs[ax]), float(xs[ax + 1])
            span = hi - lo - 2 * _WALL_MARGIN
            w = min(_uniform(rng, *config.door_width_range), span)
            mid = (lo + hi) / 2.0
            doors.append((mid - w / 2.0, y, mid + w / 2.0, y))
    return tuple(doors)


def _place_obstacles(rng, config, rooms):
    count = int(rng.integers(config.obstacle_count_range[0], config.obstacle_count_range[1] + 1))
    obstacles = []
    for _ in range(count):
        room = rooms[int(rng.integers(len(rooms)))]
        size = _uniform(rng, *config.obstacle_size_range)
        shape = "box" if rng.random() < 0.5 else "cylinder"
        rx0, ry0, rx1, ry1 = room
        if shape == "box":
            hx = hy = size / 2.0
            margin_x = hx + _OBSTACLE_WALL_MARGIN
            margin_y = hy + _OBSTACLE_WALL_MARGIN
        else:
            margin_x = margin_y = size / 2.0 + _OBSTACLE_WALL_MARGIN
        if rx1 - rx0 <= 2 * margin_x or ry1 - ry0 <= 2 * margin_y:
            raise _Retry  # obstacle cannot fit in this room
        cx = _uniform(rng, rx0 + margin_x, rx1 - margin_x)
        cy = _uniform(rng, ry0 + margin_y, ry1 - margin_y)
        if shape == "box":
            obstacles.append(Obstacle("box", (cx, cy), half_extents=(size / 2.0, size / 2.0)))
        else:
            obstacles.append(Obstacle("cylinder", (cx, cy), radius=size / 2.0))
    return tuple(obstacles)


def _obstacle_clear(obstacles, point, radius):
    p = np.asarray(point)
    for ob in obstacles:
        if ob.shape == "cylinder":
            if np.hypot(p[0] - ob.center[0], p[1] - ob.center[1]) < ob.radius + radius:
                return False
        else:
            box = np.array([[ob.center[0] - ob.half_extents[0], ob.center[1] - ob.half_extents[1],
                             ob.center[0] + ob.half_extents[0], ob.center[1] + ob.half_extents[1]]])
            if box_point_distance(box, p)[0] < radius:
                return False
    return True


def _place_start_goal(rng, config, rooms, doors, obstacles, budget):
    rooms_arr = np.asarray(rooms, dtype=np.float64).reshape(-1, 4)

    def sample_point():
        budget.spend()
        room = rooms_arr[int(rng.integers(len(rooms_arr)))]
        c = config.clearance
        if room[2] - room[0] <= 2 * c or room[3] - room[1] <= 2 * c:
            raise _Retry
        x = _uniform(rng, room[0] + c, room[2] - c)
        y = _uniform(rng, room[1] + c, room[3] - c)
        p = np.array([x, y])
        if not _obstacle_clear(obstacles, p, config.clearance):
            raise _Retry
        return p

    for _ in range(20):
        try:
            start = sample_point()
            goal = sample_point()
        except _Retry:
            continue
        if np.linalg.norm(goal - start) >= config.min_start_goal_distance:
            theta = _uniform(rng, -np.pi, np.pi)
            return (float(start[0]), float(start[1]), theta), (float(goal[0]), float(goal[1]))
    raise _Retry


# ---------------------------------------------------------------------------
# Walls and collision world


def _wall_segments(rooms, doors):
    """Room edges, deduplicated along shared boundaries, with door gaps cut out."""
    vertical = {}  # x -> list of (y0, y1)
    horizontal = {}  # y -> list of (x0, x1)

    def add(table, key, lo, hi):
        key = round(key, 9)
        table.setdefault(key, []).append((lo, hi))

    for x0, y0, x1, y1 in rooms:
        add(vertical, x0, y0, y1)
        add(vertical, x1, y0, y1)
        add(horizontal, y0, x0, x1)
        add(horizontal, y1, x0, x1)

    gaps_v = {}
    gaps_h = {}
    for dx0, dy0, dx1, dy1 in doors:
        if abs(dx0 - dx1) < 1e-9:
            gaps_v.setdefault(round(dx0, 9), []).append((min(dy0, dy1), max(dy0, dy1)))
        else:
            gaps_h.setdefault(round(dy0, 9), []).append((min(dx0, dx1), max(dx0, dx1)))

    def merged(intervals):
        out = []
        for lo, hi in sorted(intervals):
            if out and lo <= out[-1][1] + 1e-9:
                out[-1] = (out[-1][0], max(out[-1][1], hi))
            else:
                out.append((lo, hi))
        return out

    def subtract(intervals, gaps):
        for glo, ghi in sorted(gaps):
            nxt = []
            for lo, hi in intervals:
                if ghi <= lo or glo >= hi:
                    nxt.append((lo, hi))
                    continue
                if glo > lo:
                    nxt.append((lo, glo))
                if ghi < hi:
                    nxt.append((ghi, hi))
            intervals = nxt
        return intervals

    segments = []
    for x, ivs in sorted(vertical.items()):
        for lo, hi in subtract(merged(ivs), gaps_v.get(x, [])):
            if hi - lo > 1e-9:
                segments.append((x, lo, x, hi))
    for y, ivs in sorted(horizontal.items()):
        for lo, hi in subtract(merged(ivs), gaps_h.get(y, [])):
            if hi - lo > 1e-9:
                segments.append((lo, y, hi, y))
    return np.asarray(segments, dtype=np.float64).reshape(-1, 4)


def layout_world(layout: LayoutSpec) -> StaticWorld:
    """Collision geometry for a layout."""
    segments = _wall_segments(layout.rooms, layout.doors)
    circles = []
    boxes = []
    for ob in layout.obstacles:
        if ob.shape == "cylinder":
            circles.append((ob.center[0], ob.center[1], ob.radius))
        else:
            boxes.append((ob.center[0] - ob.half_extents[0], ob.center[1] - ob.half_extents[1],
                          ob.center[0] + ob.half_extents[0], ob.center[1] + ob.half_extents[1]))
    rooms = np.asarray(layout.rooms, dtype=np.float64).reshape(-1, 4)
    bounds = np.array([rooms[:, 0].min(), rooms[:, 1].min(), rooms[:, 2].max(), rooms[:, 3].max()])
    return StaticWorld(
        segments=segments,
        circles=np.asarray(circles, dtype=np.float64).reshape(-1, 3),
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        bounds=bounds,
        rooms=rooms,
    )


# ---------------------------------------------------------------------------
# Validation


def validate_layout(layout: LayoutSpec) -> ValidationReport:
    """Report every violated layout invariant; an empty report means valid."""
    report = ValidationReport()
    rooms = np.asarray(layout.rooms, dtype=np.float64).reshape(-1, 4)

    for i in range(len(rooms)):
        for j in range(i + 1, len(rooms)):
            ox = min(rooms[i, 2], rooms[j, 2]) - max(rooms[i, 0], rooms[j, 0])
            oy = min(rooms[i, 3], rooms[j, 3]) - max(rooms[i, 1], rooms[j, 1])
            if ox > 1e-9 and oy > 1e-9:
                report.violations.append(f"rooms {i} and {j} overlap beyond a shared wall")

    for k, ob in enumerate(layout.obstacles):
        if not _obstacle_inside_some_room(ob, rooms):
            report.violations.append(f"obstacle {k} extends outside every room")

    start = np.asarray(layout.start_pose[:2])
    goal = np.asarray(layout.goal_position)
    if not point_in_rooms(rooms, start):
        report.violations.append("start pose lies outside every room")
    if not point_in_rooms(rooms, goal):
        report.violations.append("goal lies outside every room")
    if not _obstacle_clear(layout.obstacles, start, layout.clearance):
        report.violations.append("an obstacle overlaps the start disc")
    if not _obstacle_clear(layout.obstacles, goal, layout.clearance):
        report.violations.append("an obstacle overlaps the goal disc")

    dist = float(np.linalg.norm(goal - start))
    if dist < MIN_START_GOAL_DISTANCE:
        report.violations.append(
            f"start-goal distance {dist:.3f} m is below the {MIN_START_GOAL_DISTANCE} m minimum")

    theta = layout.start_pose[2]
    if not (-np.pi < theta <= np.pi):
        report.violations.append("start heading is not normalized to (-pi, pi]")

    if not _door_graph_connected(rooms, layout.doors):
        report.violations.append("door graph does not connect every room")

    world = layout.world()
    grid, origin = occupancy_grid(world, cell=0.05)
    if not grid_connected(grid, origin, 0.05, start, goal):
        report.violations.append("goal is not reachable from start through free space")
    return report


def _door_graph_connected(rooms, doors) -> bool:
    n = len(rooms)
    if n <= 1:
        return True
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for dx0, dy0, dx1, dy1 in doors:
        mx, my = (dx0 + dx1) / 2.0, (dy0 + dy1) / 2.0
        touching = [
            i for i, (rx0, ry0, rx1, ry1) in enumerate(rooms)
            if rx0 - 1e-9 <= mx <= rx1 + 1e-9 and ry0 - 1e-9 <= my <= ry1 + 1e-9
        ]
        for i in touching[1:]:
            parent[find(i)] = find(touching[0])
    return len({find(i) for i in range(n)}) == 1


def _obstacle_inside_some_room(ob: Obstacle, rooms) -> bool:
    cx, cy = ob.center
    if ob.shape == "cylinder":
        ex = ey = ob.radius
    else:
        ex, ey = ob.half_extents
    for rx0, ry0, rx1, ry1 in rooms:
        if cx - ex >= rx0 - 1e-9 and cx + ex <= rx1 + 1e-9 and cy - ey >= ry0 - 1e-9 and cy + ey <= ry1 + 1e-9:
            return True
    return False


# ---------------------------------------------------------------------------
# Serialization: UTF-8 JSON, format_version 1, full float round-trip precision


def layout_to_dict(layout: LayoutSpec) -> dict:
    obstacles = []
    for ob in layout.obstacles:
        entry = {"shape": ob.shape, "center": list(ob.center)}
        if ob.shape == "box":
            entry["half_extents"] = list(ob.half_extents)
        else:
            entry["radius"] = ob.radius
        obstacles.append(entry)
    return {
        "format_version": LAYOUT_FORMAT_VERSION,
        "seed": layout.seed,
        "rooms": [list(r) for r in layout.rooms],
        "doors": [list(d) for d in layout.doors],
        "obstacles": obstacles,
        "start_pose": list(layout.start_pose),
        "goal_position": list(layout.goal_position),
        "clearance": layout.clearance,
    }


def dumps_layout(layout: LayoutSpec) -> str:
    return json.dumps(layout_to_dict(layout))


def layout_from_dict(doc: dict) -> LayoutSpec:
    try:
        version = doc["format_version"]
        if version != LAYOUT_FORMAT_VERSION:
            raise ParseError(f"unsupported layout format_version {version}")
        obstacles = []
        for entry in doc["obstacles"]:
            if entry["shape"] == "box":
                obstacles.append(Obstacle("box", tuple(entry["center"]),
                                          half_extents=tuple(entry["half_extents"])))
            else:
                obstacles.append(Obstacle("cylinder", tuple(entry["center"]),
                                          radius=float(entry["radius"])))
        return LayoutSpec(
            seed=int(doc["seed"]),
            rooms=tuple(tuple(r) for r in doc["rooms"]),
            doors=tuple(tuple(d) for d in doc["doors"]),
            obstacles=tuple(obstacles),
            start_pose=tuple(doc["start_pose"]),
            goal_position=tuple(doc["goal_position"]),
            clearance=float(doc["clearance"]),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"layout document malformed: {exc}") from exc


def loads_layout(text: str) -> LayoutSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("layout document must be a JSON object", offset=0)
    return layout_from_dict(doc)


def save_layout(layout: LayoutSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_layout(layout))


def load_layout(path) -> LayoutSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_layout(fh.read())


def sample_eval_suite(config: GenConfig, n: int, seed: int) -> list:
    """n layouts from consecutive seeds seed..seed+n-1."""
    if n < 1:
        raise InvalidArgument("suite size must be >= 1")
    return [generate_layout(config, seed + i) for i in range(n)]
