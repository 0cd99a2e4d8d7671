"""Hybrid A* for the towing vehicle and reference resampling along the resulting path."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .core import InvalidInputError, SystemGeometry, wrap_angle
from .perception import OccupancyGrid

PATH_COLUMNS = ("s", "x", "y", "psi")
_OCTILE_SLACK = math.cos(math.pi / 8)  # octile metric overestimates Euclidean length by at most 1/cos(22.5 deg)


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReferencePath:
    poses: np.ndarray  # (M, 3): x, y, psi
    s: np.ndarray  # (M,) cumulative arc length

    def __post_init__(self):
        p = np.array(self.poses, float).reshape(-1, 3)
        s = np.array(self.s, float).reshape(-1)
        if len(p) == 0 or len(s) != len(p):
            raise InvalidInputError("path needs at least one pose and one arc length per pose")
        if np.any(np.diff(s) < 0):
            raise InvalidInputError("arc length must be non-decreasing")
        p.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "poses", p)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_poses(cls, poses) -> "ReferencePath":
        p = np.asarray(poses, float).reshape(-1, 3)
        ds = np.hypot(*np.diff(p[:, :2], axis=0).T) if len(p) > 1 else np.empty(0)
        return cls(p, np.concatenate(([0.0], np.cumsum(ds))))

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0])

    def interpolate(self, s) -> np.ndarray:
        """Poses at arc lengths ``s`` (clamped to the path); headings interpolated on the unwrapped sequence."""
        s = np.clip(np.asarray(s, float), self.s[0], self.s[-1])
        if len(self.s) == 1:
            return np.broadcast_to(self.poses[0], s.shape + (3,)).copy()
        psi = np.unwrap(self.poses[:, 2])
        out = np.stack([np.interp(s, self.s, self.poses[:, 0]),
                        np.interp(s, self.s, self.poses[:, 1]),
                        np.interp(s, self.s, psi)], axis=-1)
        out[..., 2] = wrap_angle(out[..., 2])
        return out

    def project(self, point, s_lo: float = -np.inf, s_hi: float = np.inf) -> float:
        """Arc length of the nearest path point, optionally restricted to ``[s_lo, s_hi]``."""
        p = np.asarray(point, float)
        if len(self.s) == 1:
            return float(self.s[0])
        a, b = self.poses[:-1, :2], self.poses[1:, :2]
        e = b - a
        ee = (e ** 2).sum(axis=1)
        frac = np.where(ee > 0, ((p - a) * e).sum(axis=1) / np.where(ee > 0, ee, 1.0), 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        cand_s = self.s[:-1] + frac * (self.s[1:] - self.s[:-1])
        cand_s = np.clip(cand_s, s_lo, s_hi)
        pts = np.stack([np.interp(cand_s, self.s, self.poses[:, 0]), np.interp(cand_s, self.s, self.poses[:, 1])], 1)
        d = np.hypot(*(pts - p).T)
        return float(cand_s[int(np.argmin(d))])

    def save(self, path) -> None:
        rows = np.column_stack((self.s, self.poses))
        np.savetxt(path, rows, fmt="%.9g", delimiter=",", header=",".join(PATH_COLUMNS), comments="")

    @classmethod
    def load(cls, path) -> "ReferencePath":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(rows[:, 1:4], rows[:, 0])


def resample_reference(path: ReferencePath, position, v_ref: float, dt: float, N: int,
                       s_lo: float = -np.inf, s_hi: float = np.inf) -> tuple[np.ndarray, float]:
    """``N + 1`` reference positions spaced ``v_ref * dt`` ahead of the projection of ``position``.

    Returns the positions ``(N + 1, 2)`` and the projected arc length.
    """
    s0 = path.project(position, s_lo, s_hi)
    s = s0 + v_ref * dt * np.arange(N + 1)
    return path.interpolate(s)[:, :2], s0


# -- hybrid A* ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HybridAStarParams:
    steer_max: float = 0.6
    n_steer: int = 5
    heading_bins: int = 72
    step_cells: int = 2
    max_nodes: int = 200_000
    goal_heading_tol: float = 0.1  # well inside the loop's arrival tolerance; forward-only motion cannot fix heading on the spot
    steer_penalty: float = 0.1  # extra cost per meter at full lock
    clearance_margin: float = 0.0
    goal_approach: float = 1.0  # straight run into the goal so vehicle and trailer arrive aligned

    def __post_init__(self):
        if (self.n_steer < 1 or self.heading_bins < 4 or self.step_cells < 1 or not 0 < self.steer_max < math.pi / 2
                or self.goal_approach < 0):
            raise InvalidInputError("invalid hybrid A* parameters")


class ClearanceMap:
    """Lower bound on the distance from any point to the nearest occupied cell."""

    def __init__(self, grid: OccupancyGrid):
        self.grid = grid
        res = grid.resolution
        occ = grid.occupancy
        if occ.any():
            self.edt = ndimage.distance_transform_edt(~occ) * res
        else:
            self.edt = np.full(occ.shape, np.inf)
        # point to its cell center plus cell center to the occupied cell's far corner
        self.slack = res * math.sqrt(2.0)

    def clearance(self, pts: np.ndarray) -> np.ndarray:
        g = self.grid
        ij = np.floor((np.asarray(pts, float) - np.asarray(g.origin)) / g.resolution).astype(int)
        inside = (ij[..., 0] >= 0) & (ij[..., 0] < g.spec.width) & (ij[..., 1] >= 0) & (ij[..., 1] < g.spec.height)
        out = np.full(ij.shape[:-1], -np.inf)
        out[inside] = self.edt[ij[inside][:, 0], ij[inside][:, 1]] - self.slack
        return out


def vehicle_poses_free(poses: np.ndarray, cmap: ClearanceMap, geom: SystemGeometry, margin: float = 0.0) -> bool:
    poses = np.asarray(poses, float).reshape(-1, 3)
    off = np.asarray(geom.vehicle_circle_offsets)
    c = poses[:, None, :2] + off[None, :, None] * np.stack([np.cos(poses[:, 2]), np.sin(poses[:, 2])], -1)[:, None]
    return bool(np.all(cmap.clearance(c) > geom.r_f + margin))


def grid_distance_field(grid: OccupancyGrid, goal_xy, free: np.ndarray | None = None) -> np.ndarray:
    """Octile shortest-path distance (meters) from every free cell to the goal cell; inf if unreachable."""
    W, H = grid.occupancy.shape
    free = ~grid.occupancy if free is None else free
    gx, gy = grid.cell_of(goal_xy)
    out = np.full((W, H), np.inf)
    if not (0 <= gx < W and 0 <= gy < H) or not free[gx, gy]:
        return out
    idx = np.arange(W * H).reshape(W, H)
    rows, cols, wts = [], [], []
    for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
        i0, i1 = max(0, -dx), W - max(0, dx)
        j0, j1 = max(0, -dy), H - max(0, dy)
        ok = free[i0:i1, j0:j1] & free[i0 + dx:i1 + dx, j0 + dy:j1 + dy]
        rows.append(idx[i0:i1, j0:j1][ok])
        cols.append(idx[i0 + dx:i1 + dx, j0 + dy:j1 + dy][ok])
        wts.append(np.full(int(ok.sum()), math.hypot(dx, dy)))
    r, c, w = np.concatenate(rows), np.concatenate(cols), np.concatenate(wts)
    graph = coo_matrix((np.concatenate((w, w)), (np.concatenate((r, c)), np.concatenate((c, r)))),
                       shape=(W * H, W * H)).tocsr()
    d = dijkstra(graph, indices=idx[gx, gy])
    return d.reshape(W, H) * grid.resolution


def grid_lower_bound(grid: OccupancyGrid, start_xy, goal_xy) -> float:
    """Lower bound on the length of any path of a point through free cells.

    Octile distances over-estimate Euclidean length by at most ``1 / cos(pi/8)``;
    two cells of slack cover the start and goal offsets inside their cells.
    """
    field = grid_distance_field(grid, goal_xy)
    i, j = grid.cell_of(start_xy)
    d = field[i, j] if 0 <= i < field.shape[0] and 0 <= j < field.shape[1] else np.inf
    euclid = float(math.hypot(goal_xy[0] - start_xy[0], goal_xy[1] - start_xy[1]))
    if not np.isfinite(d):
        return euclid
    return max(euclid, d * _OCTILE_SLACK - 2.0 * grid.resolution)


@dataclass
class AStarResult:
    path: ReferencePath
    cost: float
    expanded: int


def hybrid_astar(grid: OccupancyGrid, start, goal, geom: SystemGeometry = SystemGeometry(),
                 params: HybridAStarParams = HybridAStarParams()) -> AStarResult:
    """Forward-only hybrid A* over constant-curvature arcs of the Ackermann vehicle.

    The heuristic is the larger of the Euclidean distance and the 2-D grid
    distance over cells the rear-axle point can occupy at all.
    """
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    cmap = ClearanceMap(grid)
    margin = params.clearance_margin
    if not vehicle_poses_free(start, cmap, geom, margin) or not vehicle_poses_free(goal, cmap, geom, margin):
        raise InvalidInputError("start or goal pose is in collision")
    if math.hypot(*(goal[:2] - start[:2])) < 1e-9 and abs(wrap_angle(goal[2] - start[2])) < 1e-9:
        return AStarResult(ReferencePath(start[None], [0.0]), 0.0, 0)
    res = grid.resolution
    approach = _approach_run(goal, start, cmap, geom, params, res)
    if approach is not None:
        head = hybrid_astar(grid, start, approach[0], geom, replace(params, goal_approach=0.0))
        poses = np.vstack((head.path.poses, approach[1:]))
        return AStarResult(ReferencePath.from_poses(poses), head.cost + params.goal_approach, head.expanded)
    ox, oy = grid.origin
    W, H = grid.occupancy.shape
    L = params.step_cells * res
    n_sub = params.step_cells
    max_turn = L * math.tan(params.steer_max) / geom.l
    head_tol = min(params.goal_heading_tol, max_turn)
    nb = params.heading_bins

    # the rear axle sits within max|offset| of a vehicle circle center, so it keeps this clearance
    axle_clear = geom.r_f + margin - max(abs(o) for o in geom.vehicle_circle_offsets) - cmap.slack
    free = (cmap.edt > axle_clear) & ~grid.occupancy
    field = grid_distance_field(grid, goal[:2], free)
    hfield = np.maximum(field * _OCTILE_SLACK - 2.0 * res, 0.0)

    steers = np.linspace(-params.steer_max, params.steer_max, params.n_steer) if params.n_steer > 1 else np.zeros(1)
    kappa = np.tan(steers) / geom.l
    sl = np.arange(1, n_sub + 1) / n_sub * L
    step_cost = L * (1.0 + params.steer_penalty * np.abs(steers) / params.steer_max)
    off = np.asarray(geom.vehicle_circle_offsets)
    need = geom.r_f + margin
    straight = np.abs(kappa) < 1e-12
    ksafe = np.where(straight, 1.0, kappa)

    def expand(p):
        # all primitives at once: (n_steer, n_sub, 3)
        ps = p[2] + kappa[:, None] * sl[None]
        xs = np.where(straight[:, None], p[0] + sl * math.cos(p[2]),
                      p[0] + (np.sin(ps) - math.sin(p[2])) / ksafe[:, None])
        ys = np.where(straight[:, None], p[1] + sl * math.sin(p[2]),
                      p[1] - (np.cos(ps) - math.cos(p[2])) / ksafe[:, None])
        c, s_ = np.cos(ps), np.sin(ps)
        cx = xs[..., None] + off * c[..., None]
        cy = ys[..., None] + off * s_[..., None]
        ok = (cmap.clearance(np.stack((cx, cy), -1)) > need).all(axis=(1, 2))
        return np.stack((xs, ys, wrap_angle(ps)), -1), ok

    def key(x, y, psi):
        return (int(math.floor((x - ox) / res)), int(math.floor((y - oy) / res)),
                int(math.floor(wrap_angle(psi) / (2 * math.pi) * nb)) % nb)

    def heuristic(x, y):
        i, j = int(math.floor((x - ox) / res)), int(math.floor((y - oy) / res))
        hg = hfield[i, j] if 0 <= i < W and 0 <= j < H else np.inf
        return max(hg, math.hypot(goal[0] - x, goal[1] - y))

    nodes = [(start, 0.0, -1, None)]  # pose, g, parent, primitive poses
    closed = set()
    best_g = {key(*start): 0.0}
    counter = 0
    h0 = heuristic(start[0], start[1])
    open_heap = [(h0, h0, counter, 0)]
    expanded = 0
    while open_heap:
        _, _, _, ni = heapq.heappop(open_heap)
        pose, g, _, _ = nodes[ni]
        k = key(*pose)
        if k in closed:
            continue
        closed.add(k)
        if math.hypot(pose[0] - goal[0], pose[1] - goal[1]) <= L and abs(wrap_angle(pose[2] - goal[2])) <= head_tol:
            path = _reconstruct(nodes, ni, goal)
            return AStarResult(path, g + math.hypot(goal[0] - pose[0], goal[1] - pose[1]), expanded)
        expanded += 1
        if expanded > params.max_nodes:
            break
        segs, ok = expand(pose)
        for m in range(len(steers)):
            if not ok[m]:
                continue
            end = segs[m, -1]
            kk = key(*end)
            if kk in closed:
                continue
            ng = g + step_cost[m]
            if ng >= best_g.get(kk, np.inf):
                continue
            h = heuristic(end[0], end[1])
            if not np.isfinite(h):
                continue
            best_g[kk] = ng
            nodes.append((end, ng, ni, segs[m]))
            counter += 1
            heapq.heappush(open_heap, (ng + h, h, counter, len(nodes) - 1))
    raise NoPathError(f"no path found after expanding {expanded} nodes")


def _approach_run(goal, start, cmap, geom, params, res):
    # poses from the pre-goal to the goal at <= one cell spacing; None when the run is blocked or too long
    d = params.goal_approach
    if d <= 0 or math.hypot(*(goal[:2] - start[:2])) <= 2 * d:
        return None
    n = max(1, int(math.ceil(d / res)))
    back = d * (1.0 - np.arange(n + 1) / n)
    poses = np.column_stack((goal[0] - back * math.cos(goal[2]), goal[1] - back * math.sin(goal[2]),
                             np.full(n + 1, goal[2])))
    if not vehicle_poses_free(poses, cmap, geom, params.clearance_margin):
        return None
    return poses


def _reconstruct(nodes, ni, goal) -> ReferencePath:
    segs = []
    while ni >= 0:
        pose, _, parent, seg = nodes[ni]
        segs.append(seg if seg is not None else pose[None])
        ni = parent
    poses = np.vstack(segs[::-1])
    if np.hypot(*(poses[-1, :2] - goal[:2])) > 1e-9 or abs(wrap_angle(poses[-1, 2] - goal[2])) > 1e-9:
        poses = np.vstack((poses, goal[None]))
    return ReferencePath.from_poses(poses)
