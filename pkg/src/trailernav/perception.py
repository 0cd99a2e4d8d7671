"""Simulated 2-D LiDAR, occupancy grids, DBSCAN clustering and obstacle circles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .core import InvalidInputError

WORLD_SCHEMA_VERSION = 1
NOISE = -1


# -- world description ------------------------------------------------------------

@dataclass(frozen=True)
class MovingDisc:
    radius: float
    waypoints: tuple[tuple[float, float, float], ...]  # (t, x, y), held constant outside the span

    def position(self, t: float) -> np.ndarray:
        w = np.asarray(self.waypoints, float)
        return np.array([np.interp(t, w[:, 0], w[:, 1]), np.interp(t, w[:, 0], w[:, 2])])


@dataclass(frozen=True)
class World:
    segments: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))  # x1, y1, x2, y2
    discs: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))  # x, y, r
    moving: tuple[MovingDisc, ...] = ()
    extent: tuple[float, float, float, float] = (-5.0, -5.0, 25.0, 25.0)  # xmin, ymin, xmax, ymax

    def __post_init__(self):
        object.__setattr__(self, "segments", np.asarray(self.segments, float).reshape(-1, 4))
        object.__setattr__(self, "discs", np.asarray(self.discs, float).reshape(-1, 3))
        if np.any(self.discs[:, 2] <= 0) or any(m.radius <= 0 for m in self.moving):
            raise InvalidInputError("disc radii must be positive")

    def discs_at(self, t: float) -> np.ndarray:
        """Static and moving discs at time ``t`` as ``(n, 3)`` rows."""
        if not self.moving:
            return self.discs
        mv = np.array([[*m.position(t), m.radius] for m in self.moving])
        return np.vstack((self.discs, mv))

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        allowed = {"schema_version", "extent", "segments", "discs", "moving_discs"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidInputError(f"unknown world keys: {sorted(unknown)}")
        if d.get("schema_version") != WORLD_SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported world schema_version {d.get('schema_version')!r}")
        moving = []
        for m in d.get("moving_discs", []) or []:
            extra = set(m) - {"radius", "waypoints"}
            if extra:
                raise InvalidInputError(f"unknown moving_disc keys: {sorted(extra)}")
            moving.append(MovingDisc(float(m["radius"]), tuple(tuple(map(float, w)) for w in m["waypoints"])))
        return cls(np.array(d.get("segments", []) or [], float), np.array(d.get("discs", []) or [], float),
                   tuple(moving), tuple(d.get("extent", cls.extent)))

    def to_dict(self) -> dict:
        return {"schema_version": WORLD_SCHEMA_VERSION,
                "extent": list(self.extent),
                "segments": self.segments.tolist(),
                "discs": self.discs.tolist(),
                "moving_discs": [{"radius": m.radius, "waypoints": [list(w) for w in m.waypoints]}
                                 for m in self.moving]}

    @classmethod
    def load(cls, path) -> "World":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


# -- scanning ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScanSpec:
    n_beams: int = 360
    max_range: float = 8.0
    fov: float = 2 * math.pi
    mount_offset: float = 0.3  # along the vehicle axis from the rear axle

    def __post_init__(self):
        if self.n_beams < 1 or self.max_range <= 0:
            raise InvalidInputError("scan needs >= 1 beam and positive range")


def simulate_scan(world: World, pose, spec: ScanSpec = ScanSpec(), t: float = 0.0) -> np.ndarray:
    """Ray-cast from ``pose = (x, y, heading)``; returns world-frame hit points ``(M, 2)``."""
    x, y, heading = pose
    origin = np.array([x + spec.mount_offset * math.cos(heading), y + spec.mount_offset * math.sin(heading)])
    if spec.fov >= 2 * math.pi:
        ang = heading + np.linspace(-math.pi, math.pi, spec.n_beams, endpoint=False)
    else:
        ang = heading + np.linspace(-spec.fov / 2, spec.fov / 2, spec.n_beams)
    d = np.stack((np.cos(ang), np.sin(ang)), axis=1)
    best = np.full(len(d), np.inf)

    seg = world.segments
    if len(seg):
        a = seg[:, :2]
        e = seg[:, 2:] - a
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        w = a[None] - origin  # (1, S, 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            tr = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / denom
            s = (w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0]) / denom
        ok = (np.abs(denom) > 1e-12) & (tr >= 0) & (s >= 0) & (s <= 1)
        best = np.minimum(best, np.where(ok, tr, np.inf).min(axis=1))

    discs = world.discs_at(t)
    if len(discs):
        pc = origin - discs[:, :2]  # (D, 2)
        b = d @ pc.T  # (B, D)
        c = (pc ** 2).sum(axis=1) - discs[:, 2] ** 2
        disc = b ** 2 - c[None]
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1, t2 = -b - sq, -b + sq
        tt = np.where(t1 >= 0, t1, t2)
        ok = (disc >= 0) & (tt >= 0)
        best = np.minimum(best, np.where(ok, tt, np.inf).min(axis=1))

    hit = best <= spec.max_range
    return origin + best[hit, None] * d[hit]


# -- occupancy grid -------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    resolution: float
    width: int
    height: int

    def __post_init__(self):
        if self.resolution <= 0 or self.width < 1 or self.height < 1:
            raise InvalidInputError("grid needs positive resolution and size")

    @classmethod
    def covering(cls, extent, resolution: float) -> "GridSpec":
        xmin, ymin, xmax, ymax = extent
        return cls((xmin, ymin), resolution, int(math.ceil((xmax - xmin) / resolution)),
                   int(math.ceil((ymax - ymin) / resolution)))


@dataclass(frozen=True)
class OccupancyGrid:
    spec: GridSpec
    occupancy: np.ndarray  # bool (width, height), indexed [ix, iy]

    @property
    def origin(self):
        return self.spec.origin

    @property
    def resolution(self):
        return self.spec.resolution

    def cell_of(self, p) -> tuple[int, int]:
        p = np.asarray(p, float)
        ij = np.floor((p - np.asarray(self.spec.origin)) / self.spec.resolution).astype(int)
        return int(ij[0]), int(ij[1])

    def cell_centers(self) -> np.ndarray:
        s = self.spec
        ix, iy = np.meshgrid(np.arange(s.width), np.arange(s.height), indexing="ij")
        return np.stack((s.origin[0] + (ix + 0.5) * s.resolution, s.origin[1] + (iy + 0.5) * s.resolution), -1)


def rasterize(points, spec: GridSpec) -> OccupancyGrid:
    occ = np.zeros((spec.width, spec.height), dtype=bool)
    pts = np.asarray(points, float).reshape(-1, 2)
    if len(pts):
        ij = np.floor((pts - np.asarray(spec.origin)) / spec.resolution).astype(int)
        inside = (ij[:, 0] >= 0) & (ij[:, 0] < spec.width) & (ij[:, 1] >= 0) & (ij[:, 1] < spec.height)
        occ[ij[inside, 0], ij[inside, 1]] = True
    return OccupancyGrid(spec, occ)


def rasterize_world(world: World, spec: GridSpec, t: float = 0.0, include_moving: bool = False) -> OccupancyGrid:
    """Mark every cell that touches a static shape (cell treated as its circumscribed disc)."""
    centers = OccupancyGrid(spec, np.zeros((spec.width, spec.height), bool)).cell_centers().reshape(-1, 2)
    half_diag = spec.resolution * math.sqrt(0.5)
    occ = np.zeros(len(centers), dtype=bool)
    for x1, y1, x2, y2 in world.segments:
        a, e = np.array([x1, y1]), np.array([x2 - x1, y2 - y1])
        ee = float(e @ e)
        s = np.clip(((centers - a) @ e) / ee, 0, 1) if ee > 0 else np.zeros(len(centers))
        occ |= np.linalg.norm(centers - (a + s[:, None] * e), axis=1) <= half_diag
    discs = world.discs_at(t) if include_moving else world.discs
    for x, y, r in discs:
        occ |= np.hypot(centers[:, 0] - x, centers[:, 1] - y) <= r + half_diag
    return OccupancyGrid(spec, occ.reshape(spec.width, spec.height))


# -- clustering ---------------------------------------------------------------------------

def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; returns labels ``0..k-1`` with ``-1`` for noise.

    A point is core when at least ``min_pts`` points (itself included) lie within
    ``eps``. Clusters are numbered in order of their first core point; a border
    point reachable from several clusters joins the first one that reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise InvalidInputError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    neigh = cKDTree(pts).query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        stack = [i]
        while stack:
            p = stack.pop()
            for q in sorted(neigh[p]):
                if labels[q] == NOISE:
                    labels[q] = cluster
                if core[q] and not visited[q]:
                    visited[q] = True
                    stack.append(q)
        cluster += 1
    return labels


@dataclass(frozen=True)
class ObstacleSet:
    centers: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    radii: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        c = np.array(self.centers, float).reshape(-1, 2)
        r = np.array(self.radii, float).reshape(-1)
        if len(c) != len(r) or np.any(r <= 0):
            raise InvalidInputError("obstacle circles need matching centers and positive radii")
        c.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def __len__(self) -> int:
        return len(self.radii)

    @property
    def n_obs(self) -> int:
        return len(self.radii)

    @classmethod
    def from_discs(cls, discs) -> "ObstacleSet":
        d = np.asarray(discs, float).reshape(-1, 3)
        return cls(d[:, :2], d[:, 2])


def _enclose(p: np.ndarray, min_radius: float, max_radius: float | None) -> list[tuple[np.ndarray, float]]:
    c = p.mean(axis=0)
    r = float(np.sqrt(((p - c) ** 2).sum(axis=1).max()))
    if max_radius is None or r <= max_radius or len(p) < 2:
        return [(c, max(r, min_radius))]
    # split along the principal axis at the median projection
    _, _, vt = np.linalg.svd(p - c, full_matrices=False)
    proj = (p - c) @ vt[0]
    order = np.argsort(proj, kind="stable")
    half = len(p) // 2
    return _enclose(p[order[:half]], min_radius, max_radius) + _enclose(p[order[half:]], min_radius, max_radius)


def clusters_to_circles(points, labels, min_radius: float = 0.1, max_radius: float | None = None) -> ObstacleSet:
    """Centroid / max-distance circle per cluster; noise ignored.

    With ``max_radius`` set, elongated clusters (walls) are split along their
    principal axis until every circle is at most that size.
    """
    pts = np.asarray(points, float).reshape(-1, 2)
    labels = np.asarray(labels)
    centers, radii = [], []
    for lab in sorted(set(labels.tolist()) - {NOISE}):
        for c, r in _enclose(pts[labels == lab], min_radius, max_radius):
            centers.append(c)
            radii.append(r)
    return ObstacleSet(np.array(centers).reshape(-1, 2), np.array(radii))


@dataclass(frozen=True)
class PerceptionConfig:
    scan: ScanSpec = ScanSpec()
    eps: float = 0.4
    min_pts: int = 3
    min_radius: float = 0.1
    max_radius: float | None = 0.35


def perceive(world: World, pose, t: float, cfg: PerceptionConfig = PerceptionConfig()) -> tuple[np.ndarray, ObstacleSet]:
    pts = simulate_scan(world, pose, cfg.scan, t)
    labels = dbscan(pts, cfg.eps, cfg.min_pts)
    return pts, clusters_to_circles(pts, labels, cfg.min_radius, cfg.max_radius)
