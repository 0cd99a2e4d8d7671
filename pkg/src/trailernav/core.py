"""Domain types and closed-form vehicle-trailer geometry.

State layout used everywhere as a flat array: ``[x_f, y_f, psi, zeta, omega_zeta]``.
Input layout: ``[v, delta]``. Angles are kept unwrapped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 5
INPUT_DIM = 2
IX, IY, IPSI, IZETA, IOMEGA = range(STATE_DIM)
IV, IDELTA = range(INPUT_DIM)


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class SystemState:
    xf: tuple[float, float]
    psi: float
    zeta: float
    omega_zeta: float

    def __post_init__(self):
        vals = (*self.xf, self.psi, self.zeta, self.omega_zeta)
        if len(self.xf) != 2 or not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite or malformed state {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.xf[0], self.xf[1], self.psi, self.zeta, self.omega_zeta])

    @classmethod
    def from_array(cls, a) -> "SystemState":
        a = np.asarray(a, dtype=float)
        return cls((float(a[0]), float(a[1])), float(a[2]), float(a[3]), float(a[4]))


@dataclass(frozen=True)
class ControlInput:
    v: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.delta)):
            raise InvalidInputError("non-finite control input")
        if abs(self.delta) >= math.pi / 2:
            raise InvalidInputError(f"|delta| must be < pi/2, got {self.delta}")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.delta])

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        return cls(float(a[0]), float(a[1]))


def cover_rectangle(length: float, width: float, n: int, start: float) -> tuple[tuple[float, ...], float]:
    """Offsets and common radius of ``n`` equal circles covering a body rectangle.

    The rectangle spans ``[start, start + length]`` along the body axis and is
    centered laterally.
    """
    seg = length / n
    offsets = tuple(start + seg * (i + 0.5) for i in range(n))
    return offsets, math.hypot(seg / 2, width / 2)


_VEH_OFFSETS, _VEH_RADIUS = cover_rectangle(0.82, 0.64, 2, -0.15)
_TRL_OFFSETS, _TRL_RADIUS = cover_rectangle(0.90, 0.60, 2, -0.45)


@dataclass(frozen=True)
class SystemGeometry:
    # defaults: small Ackermann robot (0.82 x 0.64 m) towing a 0.9 x 0.6 m platform trolley
    l: float = 0.55
    l_fh: float = 0.30
    l_hr: float = 0.70
    r_f: float = _VEH_RADIUS
    r_r: float = _TRL_RADIUS
    vehicle_circle_offsets: tuple[float, ...] = _VEH_OFFSETS
    trailer_circle_offsets: tuple[float, ...] = _TRL_OFFSETS

    def __post_init__(self):
        if self.l <= 0 or self.l_fh < 0 or self.l_hr < 0 or self.r_f <= 0 or self.r_r <= 0:
            raise InvalidInputError("geometry lengths and radii must be positive")
        if not self.vehicle_circle_offsets or not self.trailer_circle_offsets:
            raise InvalidInputError("need at least one covering circle per body")

    @property
    def n_fc(self) -> int:
        return len(self.vehicle_circle_offsets)

    @property
    def n_rc(self) -> int:
        return len(self.trailer_circle_offsets)


@dataclass(frozen=True)
class HistoryWindow:
    """Last ``n_f + 1`` states and inputs, oldest first.

    ``inputs[i]`` is applied over the step that starts at ``states[i]``.
    """

    states: np.ndarray  # (n_f + 1, 5)
    inputs: np.ndarray  # (n_f + 1, 2)

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        u = np.array(self.inputs, dtype=float)
        if s.ndim != 2 or s.shape[1] != STATE_DIM or u.shape != (s.shape[0], INPUT_DIM):
            raise InvalidInputError(f"misaligned history window {s.shape} / {u.shape}")
        s.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "inputs", u)

    @property
    def n_f(self) -> int:
        return self.states.shape[0] - 1

    @classmethod
    def from_lists(cls, states: list[SystemState], inputs: list[ControlInput]) -> "HistoryWindow":
        return cls(np.array([s.as_array() for s in states]), np.array([u.as_array() for u in inputs]))

    @classmethod
    def constant(cls, state, u, n_f: int) -> "HistoryWindow":
        s = state.as_array() if isinstance(state, SystemState) else np.asarray(state, float)
        a = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, float)
        return cls(np.tile(s, (n_f + 1, 1)), np.tile(a, (n_f + 1, 1)))

    def latest(self) -> SystemState:
        return SystemState.from_array(self.states[-1])

    def shifted(self, state, u) -> "HistoryWindow":
        """Drop the oldest frame and append ``(state, u)``."""
        s = np.vstack([self.states[1:], np.asarray(state, float)[None]])
        a = np.vstack([self.inputs[1:], np.asarray(u, float)[None]])
        return HistoryWindow(s, a)


@dataclass(frozen=True)
class Bounds:
    state_lo: tuple[float, ...] = (-1e4, -1e4, -1e4, -1e4, -2.0)
    state_hi: tuple[float, ...] = (1e4, 1e4, 1e4, 1e4, 2.0)
    input_lo: tuple[float, float] = (0.0, -0.6)
    input_hi: tuple[float, float] = (1.0, 0.6)
    theta_lo: float = -1.2
    theta_hi: float = 1.2
    omega_psi_lo: float = -1.2
    omega_psi_hi: float = 1.2

    def __post_init__(self):
        if len(self.state_lo) != STATE_DIM or len(self.state_hi) != STATE_DIM:
            raise InvalidInputError("state bounds need 5 components")
        if any(lo > hi for lo, hi in zip(self.state_lo, self.state_hi)):
            raise InvalidInputError("state_lo > state_hi")
        if any(lo > hi for lo, hi in zip(self.input_lo, self.input_hi)):
            raise InvalidInputError("input_lo > input_hi")
        if not self.theta_lo < 0 < self.theta_hi:
            raise InvalidInputError("hitch limits must straddle zero")
        if self.omega_psi_lo > self.omega_psi_hi:
            raise InvalidInputError("omega_psi_lo > omega_psi_hi")
        if max(abs(self.input_lo[1]), abs(self.input_hi[1])) >= math.pi / 2:
            raise InvalidInputError("steering bounds must stay inside (-pi/2, pi/2)")

    def clip_input(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, float), self.input_lo, self.input_hi)


def unit_vector(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def hitch_angle(state: SystemState) -> float:
    return state.psi - state.zeta


def hitch_position(state: SystemState, geom: SystemGeometry) -> np.ndarray:
    return np.asarray(state.xf, float) - geom.l_fh * unit_vector(state.psi)


def trailer_position(state: SystemState, geom: SystemGeometry) -> np.ndarray:
    return hitch_position(state, geom) - geom.l_hr * unit_vector(state.zeta)


def vehicle_yaw_rate(u: ControlInput, geom: SystemGeometry) -> float:
    if not abs(u.delta) < math.pi / 2:
        raise InvalidInputError(f"|delta| must be < pi/2, got {u.delta}")
    return u.v * math.tan(u.delta) / geom.l


def covering_circles(state: SystemState, geom: SystemGeometry) -> tuple[list[np.ndarray], list[np.ndarray]]:
    xf = np.asarray(state.xf, float)
    ev, et = unit_vector(state.psi), unit_vector(state.zeta)
    xr = trailer_position(state, geom)
    return ([xf + o * ev for o in geom.vehicle_circle_offsets],
            [xr + o * et for o in geom.trailer_circle_offsets])


def circle_centers_array(states: np.ndarray, geom: SystemGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised covering circles for a stack of state rows.

    Returns vehicle centers ``(..., n_fc, 2)`` and trailer centers ``(..., n_rc, 2)``.
    """
    states = np.asarray(states, float)
    xf = states[..., :2]
    ev = np.stack([np.cos(states[..., IPSI]), np.sin(states[..., IPSI])], axis=-1)
    et = np.stack([np.cos(states[..., IZETA]), np.sin(states[..., IZETA])], axis=-1)
    xr = xf - geom.l_fh * ev - geom.l_hr * et
    vo = np.asarray(geom.vehicle_circle_offsets)
    to = np.asarray(geom.trailer_circle_offsets)
    veh = xf[..., None, :] + vo[:, None] * ev[..., None, :]
    trl = xr[..., None, :] + to[:, None] * et[..., None, :]
    return veh, trl


def trailer_position_array(states: np.ndarray, geom: SystemGeometry) -> np.ndarray:
    states = np.asarray(states, float)
    ev = np.stack([np.cos(states[..., IPSI]), np.sin(states[..., IPSI])], axis=-1)
    et = np.stack([np.cos(states[..., IZETA]), np.sin(states[..., IZETA])], axis=-1)
    return states[..., :2] - geom.l_fh * ev - geom.l_hr * et


def unwrap_continuous(prev: float, angle: float) -> float:
    """Shift ``angle`` by multiples of 2*pi to be closest to ``prev``."""
    return prev + wrap_angle(angle - prev)
