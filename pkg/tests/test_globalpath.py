import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trailernav.core import InvalidInputError, SystemGeometry, wrap_angle
from trailernav.globalpath import (HybridAStarParams, NoPathError, ReferencePath, grid_distance_field,
                                   grid_lower_bound, hybrid_astar, resample_reference)
from trailernav.perception import GridSpec, OccupancyGrid, World, rasterize_world
from trailernav.scenarios import builtin_scenarios

GEOM = SystemGeometry()


def empty_grid(w=120, h=60, origin=(-2.0, -3.0), res=0.1):
    return OccupancyGrid(GridSpec(origin, res, w, h), np.zeros((w, h), bool))


def box_distance(points, grid):
    """Exact distance from each point to the union of occupied cell squares."""
    occ = np.argwhere(grid.occupancy)
    if len(occ) == 0:
        return np.full(len(points), np.inf)
    res = grid.resolution
    centers = np.asarray(grid.origin) + (occ + 0.5) * res
    out = np.empty(len(points))
    for i, p in enumerate(points):
        d = np.maximum(np.abs(centers - p) - res / 2, 0.0)
        out[i] = np.hypot(d[:, 0], d[:, 1]).min()
    return out


def dense_vehicle_clearance(path, grid, step=0.02):
    poses = path.interpolate(np.arange(path.s[0], path.s[-1] + step, step))
    off = np.asarray(GEOM.vehicle_circle_offsets)
    c = poses[:, None, :2] + off[None, :, None] * np.stack([np.cos(poses[:, 2]), np.sin(poses[:, 2])], -1)[:, None]
    return box_distance(c.reshape(-1, 2), grid).min()


def world_grid(world):
    return rasterize_world(world, GridSpec.covering(world.extent, 0.1))


def test_start_equals_goal():
    res = hybrid_astar(empty_grid(), (0.0, 0.0, 0.3), (0.0, 0.0, 0.3), GEOM)
    assert len(res.path.poses) == 1 and res.path.length == 0.0 and res.cost == 0.0


def test_straight_goal_length():
    grid = empty_grid()
    res = hybrid_astar(grid, (0.0, 0.0, 0.0), (5.0, 0.0, 0.0), GEOM)
    assert 5.0 <= res.path.length <= 5.5
    # the grid oracle agrees that nothing shorter exists
    assert grid_lower_bound(grid, (0.0, 0.0), (5.0, 0.0)) <= res.path.length


def test_goal_approach_is_straight_and_aligned():
    grid = empty_grid()
    goal = (6.0, 1.0, 0.4)
    params = HybridAStarParams()
    path = hybrid_astar(grid, (0.0, 0.0, 0.0), goal, GEOM, params).path
    tail = path.poses[path.s >= path.s[-1] - params.goal_approach + 1e-9]
    assert np.allclose(tail[:, 2], goal[2])
    # every tail point lies on the goal heading line
    assert np.allclose((tail[:, 1] - goal[1]) * math.cos(goal[2]) - (tail[:, 0] - goal[0]) * math.sin(goal[2]), 0.0)
    direct = hybrid_astar(grid, (0.0, 0.0, 0.0), goal, GEOM, HybridAStarParams(goal_approach=0.0)).path
    assert direct.poses[-1] == pytest.approx(goal)


def test_wall_gives_no_path():
    world = World(segments=[[4.0, -3.0, 4.0, 3.0]], extent=(-2, -3, 10, 3))
    grid = world_grid(world)
    with pytest.raises(NoPathError):
        hybrid_astar(grid, (0.0, 0.0, 0.0), (8.0, 0.0, 0.0), GEOM)


def test_start_in_collision_rejected():
    world = World(discs=[[0.0, 0.0, 0.5]], extent=(-2, -3, 10, 3))
    with pytest.raises(InvalidInputError):
        hybrid_astar(world_grid(world), (0.0, 0.0, 0.0), (6.0, 0.0, 0.0), GEOM)
    with pytest.raises(InvalidInputError):
        HybridAStarParams(steer_max=2.0)


def test_distance_field_examples():
    grid = empty_grid(10, 10, (0.0, 0.0), 1.0)
    field = grid_distance_field(grid, (0.5, 0.5))
    assert field[0, 0] == 0.0 and field[3, 0] == 3.0 and field[2, 2] == pytest.approx(2 * math.sqrt(2))
    assert field[5, 3] == pytest.approx(2 + 3 * math.sqrt(2))


@pytest.mark.parametrize("name", list(builtin_scenarios()))
def test_astar_on_builtin_worlds(name):
    scn = builtin_scenarios()[name]
    grid = world_grid(scn.world)
    params = HybridAStarParams()
    res = hybrid_astar(grid, scn.start, scn.goal, GEOM, params)
    path = res.path
    # admissibility: the reported cost never undercuts the 2-D grid bound
    assert res.cost >= grid_lower_bound(grid, scn.start[:2], scn.goal[:2]) - 1e-9
    assert res.cost >= path.length - 1e-9
    assert np.allclose(path.poses[0], scn.start) and np.allclose(path.poses[-1], scn.goal)
    assert np.all(np.diff(path.s) >= 0)
    L = params.step_cells * grid.resolution
    assert np.all(np.diff(path.s) <= L + 1e-9)
    max_turn = L * math.tan(params.steer_max) / GEOM.l
    assert np.all(np.abs(wrap_angle(np.diff(path.poses[:, 2]))) <= max_turn + 1e-9)
    assert dense_vehicle_clearance(path, grid) >= GEOM.r_f


def test_reference_path_basics(tmp_path):
    path = ReferencePath.from_poses([[0, 0, 0], [3, 0, 0], [3, 4, math.pi / 2]])
    assert path.length == 7.0 and np.allclose(path.s, [0, 3, 7])
    assert np.allclose(path.interpolate(1.5), [1.5, 0, 0])
    assert np.allclose(path.interpolate(100.0), [3, 4, math.pi / 2])
    assert path.project([1.0, 0.5]) == pytest.approx(1.0)
    assert path.project([1.0, 0.5], s_lo=2.0) == pytest.approx(2.0)
    path.save(tmp_path / "p.csv")
    back = ReferencePath.load(tmp_path / "p.csv")
    assert np.allclose(back.poses, path.poses) and np.allclose(back.s, path.s)
    with pytest.raises(InvalidInputError):
        ReferencePath([[0, 0, 0], [1, 0, 0]], [1.0, 0.0])


def test_resample_examples():
    path = ReferencePath.from_poses([[0, 0, 0], [10, 0, 0]])
    ref, s0 = resample_reference(path, (0.0, 0.0), 1.0, 0.1, 30)
    assert s0 == 0.0 and ref.shape == (31, 2)
    assert np.allclose(ref[:, 0], np.arange(31) * 0.1) and not np.any(ref[:, 1])
    end, _ = resample_reference(path, (10.0, 0.0), 1.0, 0.1, 30)
    assert np.allclose(end, [10.0, 0.0])
    ref2, _ = resample_reference(path, (12.0, 1.0), 1.0, 0.1, 5)
    assert np.allclose(ref2, [10.0, 0.0])


@given(st.floats(0, 7), st.floats(0.1, 2.0), st.integers(1, 30))
@settings(max_examples=50, deadline=None)
def test_resample_projection_idempotent(s, v_ref, N):
    path = ReferencePath.from_poses([[0, 0, 0], [3, 0, 0], [3, 4, math.pi / 2]])
    ref, s0 = resample_reference(path, path.interpolate(s)[:2], v_ref, 0.1, N)
    assert s0 == pytest.approx(s, abs=1e-9)
    again, s1 = resample_reference(path, ref[0], v_ref, 0.1, N)
    assert s1 == pytest.approx(s0, abs=1e-9) and np.allclose(again, ref)
    assert np.all(np.hypot(*np.diff(ref, axis=0).T) <= v_ref * 0.1 + 1e-9)
