import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trailernav.perception import (GridSpec, MovingDisc, NOISE, ObstacleSet, ScanSpec, World, clusters_to_circles,
                                   dbscan, perceive, rasterize, rasterize_world, simulate_scan)


def brute_force_dbscan(pts, eps, min_pts):
    """eps-graph connected components over core points; border points join the lowest adjacent cluster."""
    n = len(pts)
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    adj = d <= eps
    core = adj.sum(1) >= min_pts
    comp = np.full(n, -1)
    ncomp = 0
    for i in range(n):  # components numbered by their lowest core index
        if core[i] and comp[i] < 0:
            comp[i] = ncomp
            frontier = [i]
            while frontier:
                p = frontier.pop()
                for q in np.nonzero(adj[p] & core)[0]:
                    if comp[q] < 0:
                        comp[q] = ncomp
                        frontier.append(q)
            ncomp += 1
    labels = comp.copy()
    for i in np.nonzero(~core)[0]:
        owners = comp[adj[i] & core]
        labels[i] = owners.min() if len(owners) else NOISE
    return labels


@pytest.mark.parametrize("seed", range(100))
def test_dbscan_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    k = int(rng.integers(1, 6))
    centers = rng.uniform(0, 10, (k, 2))
    pts = centers[rng.integers(0, k, n)] + rng.normal(0, rng.uniform(0.1, 0.8), (n, 2))
    eps = float(rng.uniform(0.2, 0.8))
    min_pts = int(rng.integers(1, 6))
    assert np.array_equal(dbscan(pts, eps, min_pts), brute_force_dbscan(pts, eps, min_pts))


@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5)), min_size=1, max_size=60),
       st.floats(0.1, 1.0), st.integers(1, 5))
@settings(max_examples=100, deadline=None)
def test_dbscan_property(points, eps, min_pts):
    pts = np.array(points)
    labels = dbscan(pts, eps, min_pts)
    assert np.array_equal(labels, brute_force_dbscan(pts, eps, min_pts))
    assert np.array_equal(labels, dbscan(pts, eps, min_pts))


def test_dbscan_examples():
    rng = np.random.default_rng(0)
    blobs = np.vstack((rng.normal(0, 0.1, (20, 2)), rng.normal(0, 0.1, (20, 2)) + [10, 0]))
    assert len(set(dbscan(blobs, 0.5, 3).tolist())) == 2
    assert set(dbscan(np.ones((5, 2)), 0.1, 3).tolist()) == {0}
    assert dbscan([[0.0, 0.0]], 0.5, 3).tolist() == [NOISE]


def test_circles_examples():
    obs = clusters_to_circles([[2.0, 3.0]], [0], min_radius=0.1)
    assert np.allclose(obs.centers, [[2, 3]]) and obs.radii[0] == 0.1
    sq = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    obs = clusters_to_circles(sq, [0, 0, 0, 0])
    assert np.allclose(obs.centers, [[0.5, 0.5]]) and obs.radii[0] == pytest.approx(math.sqrt(2) / 2)
    two = clusters_to_circles(np.vstack((sq, sq + 5)), [0] * 4 + [1] * 4)
    assert two.n_obs == 2
    assert clusters_to_circles(sq, [NOISE] * 4).n_obs == 0


@given(st.integers(0, 10_000), st.sampled_from([None, 0.35, 1.0]))
@settings(max_examples=50, deadline=None)
def test_circles_cover_cluster_points(seed, max_radius):
    rng = np.random.default_rng(seed)
    pts = np.vstack((rng.normal(0, 0.3, (30, 2)), rng.uniform(-3, 3, (40, 2)) * [1, 0.05] + [4, 0]))
    labels = dbscan(pts, 0.4, 3)
    obs = clusters_to_circles(pts, labels, 0.1, max_radius)
    for p, lab in zip(pts, labels):
        if lab != NOISE:
            assert np.min(np.hypot(*(obs.centers - p).T) - obs.radii) <= 1e-9
    if max_radius is not None:
        assert np.all(obs.radii <= max_radius + 1e-12)


def test_scan_examples():
    assert simulate_scan(World(), (0, 0, 0)).shape == (0, 2)
    spec = ScanSpec(n_beams=1, fov=0.0, mount_offset=0.0, max_range=8.0)
    hit = simulate_scan(World(segments=[[2.0, -1.0, 2.0, 1.0]]), (0, 0, 0), spec)
    assert np.allclose(hit, [[2.0, 0.0]])
    assert simulate_scan(World(segments=[[9.0, -1.0, 9.0, 1.0]]), (0, 0, 0), spec).shape == (0, 2)
    hit = simulate_scan(World(discs=[[3.0, 0.0, 0.5]]), (0, 0, 0), spec)
    assert np.allclose(hit, [[2.5, 0.0]])


def test_scan_sees_moving_disc_at_time():
    walker = MovingDisc(0.3, ((0.0, 3.0, 5.0), (10.0, 3.0, 0.0)))
    spec = ScanSpec(n_beams=1, fov=0.0, mount_offset=0.0)
    world = World(moving=(walker,))
    assert simulate_scan(world, (0, 0, 0), spec, t=0.0).shape == (0, 2)
    assert np.allclose(simulate_scan(world, (0, 0, 0), spec, t=10.0), [[2.7, 0.0]])


def test_rasterize_examples():
    spec = GridSpec((-1.0, -1.0), 0.1, 20, 20)
    assert not rasterize([], spec).occupancy.any()
    g = rasterize([[0.0, 0.0]], spec)
    assert g.occupancy.sum() == 1 and g.occupancy[g.cell_of([0.0, 0.0])]
    assert rasterize([[0.01, 0.01], [0.02, 0.03]], spec).occupancy.sum() == 1


@given(st.integers(0, 10_000), st.integers(-20, 20), st.integers(-20, 20))
@settings(max_examples=50, deadline=None)
def test_rasterize_translation_consistent(seed, sx, sy):
    rng = np.random.default_rng(seed)
    # points at cell centers so the shift cannot move them across a boundary by rounding
    spec = GridSpec((0.0, 0.0), 0.25, 16, 16)
    pts = (rng.integers(0, 16, (30, 2)) + 0.5) * 0.25
    shift = np.array([sx, sy]) * 0.25
    a = rasterize(pts, spec).occupancy
    b = rasterize(pts + shift, GridSpec(tuple(np.array(spec.origin) + shift), 0.25, 16, 16)).occupancy
    assert np.array_equal(a, b)


def test_rasterize_world_marks_shapes():
    world = World(segments=[[0.0, 1.0, 2.0, 1.0]], discs=[[3.0, 3.0, 0.3]])
    g = rasterize_world(world, GridSpec((0.0, 0.0), 0.1, 50, 50))
    assert g.occupancy[g.cell_of([1.0, 1.0])] and g.occupancy[g.cell_of([3.0, 3.0])]
    assert not g.occupancy[g.cell_of([1.0, 2.0])]


def test_world_round_trip(tmp_path):
    world = World(segments=[[0, 0, 1, 0]], discs=[[2, 2, 0.4]], moving=(MovingDisc(0.3, ((0, 1, 1), (5, 2, 1))),))
    world.save(tmp_path / "w.yaml")
    back = World.load(tmp_path / "w.yaml")
    assert back.to_dict() == world.to_dict()
    with pytest.raises(ValueError):
        World.from_dict({"schema_version": 1, "bogus": []})


def test_perceive_pipeline():
    world = World(discs=[[3.0, 0.0, 0.3], [0.0, 4.0, 0.3]])
    pts, obs = perceive(world, (0.0, 0.0, 0.0), 0.0)
    assert len(pts) > 0 and obs.n_obs == 2
    true = np.array([[3.0, 0.0], [0.0, 4.0]])
    for c in true:
        assert np.min(np.hypot(*(obs.centers - c).T)) < 0.3
    with pytest.raises(ValueError):
        ObstacleSet([[0, 0]], [0.0])
