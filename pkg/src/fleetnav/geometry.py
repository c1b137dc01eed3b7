"""Planar geometry kernels: raycasting, disc/capsule collision, occupancy grids.

The world is a static set of thin wall segments, circular obstacles, and
axis-aligned box obstacles. Everything here is pure numpy over those arrays;
both the procedural generator and the simulator build on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = float(np.arctan2(np.sin(theta), np.cos(theta)))
    return np.pi if wrapped == -np.pi else wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float  # normalized to (-pi, pi]

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.theta)


@dataclass
class StaticWorld:
    """Immutable collision geometry for one layout.

    segments: (S, 4) float64 rows [x1, y1, x2, y2] — walls and box edges.
    circles:  (C, 3) float64 rows [cx, cy, r].
    boxes:    (B, 4) float64 rows [xmin, ymin, xmax, ymax] (solid interiors).
    bounds:   [xmin, ymin, xmax, ymax] of the walkable area.
    """

    segments: np.ndarray
    circles: np.ndarray
    boxes: np.ndarray
    bounds: np.ndarray
    rooms: np.ndarray = field(default=None)  # (R,4) room rectangles, for containment

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 4)
        self.circles = np.asarray(self.circles, dtype=np.float64).reshape(-1, 3)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(4)
        if self.rooms is None:
            self.rooms = self.bounds.reshape(1, 4)
        self.rooms = np.asarray(self.rooms, dtype=np.float64).reshape(-1, 4)


def seg_point_distance(segments: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Distance from `point` (2,) to each segment row (S,4)."""
    p = np.asarray(point, dtype=np.float64)
    a = segments[:, 0:2]
    b = segments[:, 2:4]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.zeros(len(segments))
    nz = denom > 0.0
    t[nz] = np.einsum("ij,ij->i", p - a[nz], ab[nz]) / denom[nz]
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(closest - p, axis=1)


def box_point_distance(boxes: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Distance from `point` to each solid box (0 inside)."""
    p = np.asarray(point, dtype=np.float64)
    dx = np.maximum(np.maximum(boxes[:, 0] - p[0], p[0] - boxes[:, 2]), 0.0)
    dy = np.maximum(np.maximum(boxes[:, 1] - p[1], p[1] - boxes[:, 3]), 0.0)
    return np.hypot(dx, dy)


def _seg_seg_distance(p1, p2, q1, q2) -> float:
    """Minimum distance between segments p1-p2 and q1-q2."""
    # Intersection test first.
    d1 = p2 - p1
    d2 = q2 - q1
    cross = d1[0] * d2[1] - d1[1] * d2[0]
    w = q1 - p1
    if abs(cross) > 1e-12:
        t = (w[0] * d2[1] - w[1] * d2[0]) / cross
        s = (w[0] * d1[1] - w[1] * d1[0]) / cross
        if 0.0 <= t <= 1.0 and 0.0 <= s <= 1.0:
            return 0.0
    segs_q = np.array([[q1[0], q1[1], q2[0], q2[1]]])
    segs_p = np.array([[p1[0], p1[1], p2[0], p2[1]]])
    return min(
        seg_point_distance(segs_q, p1)[0],
        seg_point_distance(segs_q, p2)[0],
        seg_point_distance(segs_p, q1)[0],
        seg_point_distance(segs_p, q2)[0],
    )


def disc_hits(world: StaticWorld, center, radius: float) -> bool:
    """True if a disc at `center` overlaps any wall or obstacle, or leaves
    the room union."""
    c = np.asarray(center, dtype=np.float64)
    if len(world.segments) and np.any(seg_point_distance(world.segments, c) < radius):
        return True
    if len(world.circles):
        d = np.linalg.norm(world.circles[:, 0:2] - c[None, :], axis=1)
        if np.any(d < world.circles[:, 2] + radius):
            return True
    if len(world.boxes) and np.any(box_point_distance(world.boxes, c) < radius):
        return True
    return not point_in_rooms(world.rooms, c)


def capsule_hits(world: StaticWorld, p0, p1, radius: float) -> bool:
    """True if the disc swept from p0 to p1 overlaps any wall or obstacle."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    for seg in world.segments:
        if _seg_seg_distance(p0, p1, seg[0:2], seg[2:4]) < radius:
            return True
    if len(world.circles):
        path = np.array([[p0[0], p0[1], p1[0], p1[1]]])
        for cx, cy, r in world.circles:
            if seg_point_distance(path, np.array([cx, cy]))[0] < radius + r:
                return True
    for box in world.boxes:
        edges = _box_edges(box)
        if box[0] <= p0[0] <= box[2] and box[1] <= p0[1] <= box[3]:
            return True
        for seg in edges:
            if _seg_seg_distance(p0, p1, seg[0:2], seg[2:4]) < radius:
                return True
    if not (point_in_rooms(world.rooms, p0) and point_in_rooms(world.rooms, p1)):
        return True
    return False


def _box_edges(box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array(
        [
            [x0, y0, x1, y0],
            [x1, y0, x1, y1],
            [x1, y1, x0, y1],
            [x0, y1, x0, y0],
        ]
    )


def box_edges(box) -> np.ndarray:
    """Four edge segments of an axis-aligned box [xmin, ymin, xmax, ymax]."""
    return _box_edges(np.asarray(box, dtype=np.float64))


def point_in_rooms(rooms: np.ndarray, point, margin: float = 0.0) -> bool:
    """True if `point` lies inside at least one room rectangle (shrunk by
    `margin` on each side)."""
    p = np.asarray(point, dtype=np.float64)
    inside = (
        (p[0] >= rooms[:, 0] + margin)
        & (p[0] <= rooms[:, 2] - margin)
        & (p[1] >= rooms[:, 1] + margin)
        & (p[1] <= rooms[:, 3] - margin)
    )
    return bool(np.any(inside))


def raycast(world: StaticWorld, origin, angles: np.ndarray, max_range: float) -> np.ndarray:
    """First-hit distance along each angle, capped at max_range.

    Rays that hit nothing within max_range report max_range.
    """
    o = np.asarray(origin, dtype=np.float64)
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    best = np.full(len(angles), max_range, dtype=np.float64)

    segs = world.segments
    if len(world.boxes):
        segs = np.concatenate([segs] + [_box_edges(b) for b in world.boxes], axis=0)
    if len(segs):
        a = segs[:, 0:2]  # (S, 2)
        ab = segs[:, 2:4] - a
        # Solve o + t*d = a + s*ab for each (ray, segment) pair.
        denom = d[:, 0:1] * ab[None, :, 1] - d[:, 1:2] * ab[None, :, 0]  # (R, S)
        w = a[None, :, :] - o[None, None, :]  # (1, S, 2)
        t = w[:, :, 0] * ab[None, :, 1] - w[:, :, 1] * ab[None, :, 0]
        s = w[:, :, 0] * d[:, None, 1] - w[:, :, 1] * d[:, None, 0]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = t / denom
            s = s / denom
        valid = (np.abs(denom) > 1e-300) & (t >= 0.0) & (s >= 0.0) & (s <= 1.0)
        t = np.where(valid, t, np.inf)
        best = np.minimum(best, t.min(axis=1))

    if len(world.circles):
        oc = o[None, :] - world.circles[:, 0:2]  # (C, 2)
        b = np.einsum("rj,cj->rc", d, oc)  # (R, C)
        c_term = np.einsum("cj,cj->c", oc, oc) - world.circles[:, 2] ** 2
        disc = b * b - c_term[None, :]
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            t1 = -b - sq
            t2 = -b + sq
        t1 = np.where((disc >= 0.0) & (t1 >= 0.0), t1, np.inf)
        t2 = np.where((disc >= 0.0) & (t2 >= 0.0), t2, np.inf)
        best = np.minimum(best, np.minimum(t1, t2).min(axis=1))

    return np.minimum(best, max_range)


def occupancy_grid(world: StaticWorld, cell: float = 0.05, inflate: float = 0.0):
    """Boolean free-space grid over the world bounds.

    A cell is free when its center lies inside a room, farther than
    max(inflate, cell/2) from every wall segment, and outside every obstacle
    inflated by `inflate`.

    Returns (grid, origin) with grid[iy, ix] True for free cells.
    """
    x0, y0, x1, y1 = world.bounds
    nx = max(int(np.ceil((x1 - x0) / cell)), 1)
    ny = max(int(np.ceil((y1 - y0) / cell)), 1)
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys)  # (ny, nx)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (N, 2)

    in_room = np.zeros(len(pts), dtype=bool)
    for rx0, ry0, rx1, ry1 in world.rooms:
        in_room |= (pts[:, 0] >= rx0) & (pts[:, 0] <= rx1) & (pts[:, 1] >= ry0) & (pts[:, 1] <= ry1)
    free = in_room

    wall_band = max(inflate, cell * 0.5)
    if len(world.segments):
        dmin = np.full(len(pts), np.inf)
        for seg in world.segments:
            a = seg[0:2]
            ab = seg[2:4] - a
            denom = float(ab @ ab)
            if denom > 0.0:
                t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
            else:
                t = np.zeros(len(pts))
            closest = a + t[:, None] * ab
            dmin = np.minimum(dmin, np.linalg.norm(pts - closest, axis=1))
        free &= dmin >= wall_band

    for cx, cy, r in world.circles:
        free &= np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) >= r + inflate
    for bx0, by0, bx1, by1 in world.boxes:
        dx = np.maximum(np.maximum(bx0 - pts[:, 0], pts[:, 0] - bx1), 0.0)
        dy = np.maximum(np.maximum(by0 - pts[:, 1], pts[:, 1] - by1), 0.0)
        free &= np.hypot(dx, dy) >= inflate

    return free.reshape(ny, nx), np.array([x0, y0])


def grid_connected(grid: np.ndarray, origin: np.ndarray, cell: float, p: np.ndarray, q: np.ndarray) -> bool:
    """True if p and q fall on free cells in the same 4-connected component."""
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, _ = ndimage.label(grid, structure=structure)

    def cell_of(pt):
        ix = int((pt[0] - origin[0]) / cell)
        iy = int((pt[1] - origin[1]) / cell)
        if 0 <= iy < grid.shape[0] and 0 <= ix < grid.shape[1]:
            return labels[iy, ix]
        return 0

    lp, lq = cell_of(p), cell_of(q)
    return lp != 0 and lp == lq
