import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trailernav.core import (Bounds, ControlInput, HistoryWindow, InvalidInputError, SystemGeometry, SystemState,
                             circle_centers_array, covering_circles, hitch_angle, hitch_position, trailer_position,
                             trailer_position_array, unit_vector, vehicle_yaw_rate, wrap_angle)

angles = st.floats(-10.0, 10.0)
coords = st.floats(-50.0, 50.0)


def state(x=0.0, y=0.0, psi=0.0, zeta=0.0, om=0.0):
    return SystemState((x, y), psi, zeta, om)


def test_unit_vector_examples():
    assert np.allclose(unit_vector(0.0), [1, 0])
    assert np.allclose(unit_vector(math.pi / 2), [0, 1])
    assert np.allclose(unit_vector(math.pi / 4), [0.70711, 0.70711], atol=1e-5)


def test_hitch_angle_examples():
    assert hitch_angle(state(psi=0.3, zeta=0.1)) == pytest.approx(0.2)
    assert hitch_angle(state(psi=0.4, zeta=0.4)) == 0.0
    assert hitch_angle(state(psi=-0.2, zeta=0.3)) == pytest.approx(-0.5)


def test_hitch_and_trailer_position_examples():
    g = SystemGeometry(l_fh=0.5, l_hr=1.0)
    assert np.allclose(hitch_position(state(), g), [-0.5, 0])
    assert np.allclose(hitch_position(state(1, 1, math.pi / 2), g), [1, 0.5])
    s = state(0.3, -0.2, 0.7, 0.1)
    assert np.allclose(hitch_position(s, SystemGeometry(l_fh=0.0)), s.xf)
    assert np.allclose(trailer_position(state(), g), [-1.5, 0])
    assert np.allclose(trailer_position(state(zeta=math.pi / 2), g), [-0.5, -1.0])
    g0 = SystemGeometry(l_fh=0.5, l_hr=0.0)
    assert np.allclose(trailer_position(s, g0), hitch_position(s, g0))


def test_vehicle_yaw_rate_examples():
    g = SystemGeometry(l=1.0)
    assert vehicle_yaw_rate(ControlInput(1.0, 0.0), g) == 0.0
    assert vehicle_yaw_rate(ControlInput(1.0, math.pi / 4), g) == pytest.approx(1.0)
    assert vehicle_yaw_rate(ControlInput(-1.0, math.pi / 4), g) == pytest.approx(-1.0)
    with pytest.raises(InvalidInputError):
        ControlInput(1.0, math.pi / 2)


def test_covering_circles_examples():
    g1 = SystemGeometry(vehicle_circle_offsets=(0.0,))
    veh, _ = covering_circles(state(0.4, 0.2, 1.0), g1)
    assert len(veh) == 1 and np.allclose(veh[0], [0.4, 0.2])
    g2 = SystemGeometry(vehicle_circle_offsets=(0.0, 0.6))
    veh, trl = covering_circles(state(), g2)
    assert np.allclose(veh, [[0, 0], [0.6, 0]])
    assert len(trl) == g2.n_rc
    veh, _ = covering_circles(state(psi=math.pi), SystemGeometry(vehicle_circle_offsets=(0.6,)))
    assert np.allclose(veh[0], [-0.6, 0])


def test_default_circles_cover_bodies():
    # every corner of the 0.82 x 0.64 vehicle rectangle lies inside some covering circle
    g = SystemGeometry()
    veh, trl = covering_circles(state(), g)
    for cx in (-0.15, 0.67):
        for cy in (-0.32, 0.32):
            assert min(np.hypot(cx - c[0], cy - c[1]) for c in veh) <= g.r_f + 1e-12
    xr = trailer_position(state(), g)
    for cx in (xr[0] - 0.45, xr[0] + 0.45):
        for cy in (-0.3, 0.3):
            assert min(np.hypot(cx - c[0], cy - c[1]) for c in trl) <= g.r_r + 1e-12


@given(coords, coords, angles, angles)
def test_link_lengths(x, y, psi, zeta):
    g = SystemGeometry()
    s = state(x, y, psi, zeta)
    h = hitch_position(s, g)
    assert abs(np.linalg.norm(h - np.array(s.xf)) - g.l_fh) <= 1e-12 * max(1.0, g.l_fh) + 1e-12
    assert abs(np.linalg.norm(trailer_position(s, g) - h) - g.l_hr) <= 1e-12 * max(1.0, abs(x) + abs(y))


@given(st.floats(-2, 2), st.floats(-1.4, 1.4))
def test_yaw_rate_odd(v, d):
    g = SystemGeometry()
    f = vehicle_yaw_rate(ControlInput(v, d), g)
    assert vehicle_yaw_rate(ControlInput(-v, d), g) == -f
    assert vehicle_yaw_rate(ControlInput(v, -d), g) == pytest.approx(-f, abs=1e-15)


@given(coords, coords, angles, angles, angles)
def test_circles_rotate_equivariantly(x, y, psi, zeta, alpha):
    g = SystemGeometry()
    R = np.array([[math.cos(alpha), -math.sin(alpha)], [math.sin(alpha), math.cos(alpha)]])
    veh, trl = covering_circles(state(x, y, psi, zeta), g)
    p = R @ np.array([x, y])
    veh2, trl2 = covering_circles(state(p[0], p[1], psi + alpha, zeta + alpha), g)
    assert np.allclose([R @ c for c in veh], veh2, atol=1e-10)
    assert np.allclose([R @ c for c in trl], trl2, atol=1e-10)


@given(coords, coords, angles, angles)
def test_vectorised_geometry_matches_scalar(x, y, psi, zeta):
    g = SystemGeometry()
    s = state(x, y, psi, zeta)
    veh, trl = circle_centers_array(s.as_array(), g)
    v0, t0 = covering_circles(s, g)
    assert np.allclose(veh, v0, atol=1e-12) and np.allclose(trl, t0, atol=1e-12)
    assert np.allclose(trailer_position_array(s.as_array(), g), trailer_position(s, g), atol=1e-12)


@given(st.floats(-100, 100))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_state_and_window_validation():
    with pytest.raises(InvalidInputError):
        SystemState((0.0, math.nan), 0.0, 0.0, 0.0)
    with pytest.raises(InvalidInputError):
        HistoryWindow(np.zeros((4, 5)), np.zeros((3, 2)))
    w = HistoryWindow.constant(state(1.0), ControlInput(0.5, 0.1), 3)
    assert w.n_f == 3 and w.states.shape == (4, 5)
    w2 = w.shifted(np.arange(5.0), [0.2, 0.0])
    assert np.array_equal(w2.states[-1], np.arange(5.0)) and np.array_equal(w2.inputs[:-1], w.inputs[1:])
    with pytest.raises(InvalidInputError):
        Bounds(theta_lo=0.1)
