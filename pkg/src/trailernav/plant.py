"""Ground-truth vehicle-trailer simulator used as the oracle for every experiment.

The trailer is not modelled from forces. Its yaw rate relaxes with a first-order
lag toward the ideal nonholonomic (off-axle hitch) yaw rate, with payload
lengthening the lag, castor slip shrinking the target, optional Coulomb yaw drag
for wheelless loads, and additive yaw-rate bias pulses for rough ground.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core import STATE_DIM, ControlInput, InvalidInputError, SystemGeometry, SystemState

TRAJECTORY_SCHEMA_VERSION = 1
TRAJECTORY_COLUMNS = ("t", "x_f", "y_f", "psi", "zeta", "omega_zeta", "v", "delta")


class TrailerKind(str, Enum):
    RIGID_REAR_CASTOR_FRONT = "rigid_rear_castor_front"
    ALL_CASTOR = "all_castor"
    WHEELLESS_DRAG = "wheelless_drag"


# payload (kg) at which the yaw lag doubles and castor slip reaches half of slip_gain
_PAYLOAD_REF = {
    TrailerKind.RIGID_REAR_CASTOR_FRONT: 40.0,
    TrailerKind.ALL_CASTOR: 8.0,
    TrailerKind.WHEELLESS_DRAG: 15.0,
}


@dataclass(frozen=True)
class TerrainPulse:
    start: float
    duration: float
    amplitude: float  # rad/s added to the trailer yaw-rate target

    def __post_init__(self):
        if self.duration <= 0:
            raise InvalidInputError("pulse duration must be positive")


@dataclass(frozen=True)
class DisturbanceSpec:
    process_noise_std: tuple[float, ...] = (0.0,) * STATE_DIM
    terrain_pulses: tuple[TerrainPulse, ...] = ()
    constant_bias: float = 0.0

    def __post_init__(self):
        if len(self.process_noise_std) != STATE_DIM or any(s < 0 for s in self.process_noise_std):
            raise InvalidInputError("process noise needs 5 non-negative std values")

    def bias(self, t: float) -> float:
        b = self.constant_bias
        for p in self.terrain_pulses:
            if p.start <= t < p.start + p.duration:
                b += p.amplitude
        return b


@dataclass(frozen=True)
class PlantConfig:
    geom: SystemGeometry = field(default_factory=SystemGeometry)
    trailer_kind: TrailerKind = TrailerKind.RIGID_REAR_CASTOR_FRONT
    payload_mass: float = 0.0
    yaw_time_constant: float = 0.12
    slip_gain: float = 0.0
    actuator_time_constant: float = 0.08
    drag_coefficient: float = 0.0  # rad/s^2, wheelless only
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)

    def __post_init__(self):
        object.__setattr__(self, "trailer_kind", TrailerKind(self.trailer_kind))
        if self.yaw_time_constant <= 0 or self.actuator_time_constant <= 0:
            raise InvalidInputError("time constants must be positive")
        if self.payload_mass < 0:
            raise InvalidInputError("payload mass must be non-negative")
        if not 0.0 <= self.slip_gain <= 1.0:
            raise InvalidInputError("slip_gain must lie in [0, 1]")

    @property
    def effective_time_constant(self) -> float:
        return self.yaw_time_constant * (1.0 + self.payload_mass / _PAYLOAD_REF[self.trailer_kind])

    @property
    def slip_factor(self) -> float:
        m = self.payload_mass
        return 1.0 - self.slip_gain * m / (m + _PAYLOAD_REF[self.trailer_kind])


def trailer_preset(kind: str | TrailerKind, payload: float = 0.0, **overrides) -> PlantConfig:
    """Typical parameters for each trailer family (qualitative, not measured)."""
    kind = TrailerKind(kind)
    base = {
        TrailerKind.RIGID_REAR_CASTOR_FRONT: dict(yaw_time_constant=0.12, slip_gain=0.05),
        TrailerKind.ALL_CASTOR: dict(yaw_time_constant=0.25, slip_gain=0.35),
        TrailerKind.WHEELLESS_DRAG: dict(yaw_time_constant=0.18, slip_gain=0.15, drag_coefficient=0.25),
    }[kind]
    base.update(overrides)
    return PlantConfig(trailer_kind=kind, payload_mass=payload, **base)


def kinematic_trailer_rate(v: float, delta: float, theta: float, geom: SystemGeometry) -> float:
    """Yaw rate of an ideal rolling trailer hitched ``l_fh`` behind the rear axle."""
    omega_psi = v * math.tan(delta) / geom.l
    return (v * math.sin(theta) - geom.l_fh * omega_psi * math.cos(theta)) / geom.l_hr


class Plant:
    """Stateful simulator. Internal state: ``[x, y, psi, zeta, omega, v_act, delta_act]``."""

    def __init__(self, config: PlantConfig, initial: SystemState, seed: int = 0, t0: float = 0.0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        s = initial.as_array()
        self.x = np.array([*s, 0.0, 0.0])
        self.t = t0

    @property
    def state(self) -> SystemState:
        return SystemState.from_array(self.x[:STATE_DIM])

    @property
    def actuators(self) -> tuple[float, float]:
        return float(self.x[5]), float(self.x[6])

    def set_actuators(self, v: float, delta: float) -> None:
        self.x[5], self.x[6] = v, delta

    def _deriv(self, x, t, v_cmd, d_cmd):
        cfg = self.config
        g = cfg.geom
        _, _, psi, zeta, om, v, d = x
        tau_a = cfg.actuator_time_constant
        wpsi = v * math.tan(d) / g.l
        theta = psi - zeta
        target = cfg.slip_factor * (v * math.sin(theta) - g.l_fh * wpsi * math.cos(theta)) / g.l_hr
        target += cfg.disturbance.bias(t)
        dom = (target - om) / cfg.effective_time_constant
        if cfg.trailer_kind is TrailerKind.WHEELLESS_DRAG and cfg.drag_coefficient > 0:
            dom -= cfg.drag_coefficient * math.tanh(om / 0.05)
        return (v * math.cos(psi), v * math.sin(psi), wpsi, om, dom,
                (v_cmd - v) / tau_a, (d_cmd - d) / tau_a)

    def step(self, u: ControlInput, dt: float) -> SystemState:
        """Advance by ``dt`` with RK4 on substeps of at most ``dt / 10``."""
        if dt <= 0:
            raise InvalidInputError("dt must be positive")
        cfg = self.config
        stiff = 0.5 * min(cfg.effective_time_constant, cfg.actuator_time_constant)
        n_sub = max(10, math.ceil(dt / stiff))
        h = dt / n_sub
        x = [float(v) for v in self.x]
        t = self.t
        v_cmd, d_cmd = u.v, u.delta
        f = self._deriv
        for _ in range(n_sub):
            k1 = f(x, t, v_cmd, d_cmd)
            x2 = [a + 0.5 * h * b for a, b in zip(x, k1)]
            k2 = f(x2, t + 0.5 * h, v_cmd, d_cmd)
            x3 = [a + 0.5 * h * b for a, b in zip(x, k2)]
            k3 = f(x3, t + 0.5 * h, v_cmd, d_cmd)
            x4 = [a + h * b for a, b in zip(x, k3)]
            k4 = f(x4, t + h, v_cmd, d_cmd)
            x = [a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)]
            t += h
        self.x = np.array(x)
        std = np.asarray(cfg.disturbance.process_noise_std)
        if np.any(std > 0):
            self.x[:STATE_DIM] += std * self.rng.standard_normal(STATE_DIM)
        self.t = self.t + dt
        return self.state


def step_plant(plant: Plant, u: ControlInput, dt: float) -> SystemState:
    return plant.step(u, dt)


@dataclass(frozen=True)
class MeasurementNoise:
    zeta_std: float = 0.0
    omega_std: float = 0.0


def observe(plant: Plant, noise: MeasurementNoise | None = None, rng: np.random.Generator | None = None) -> SystemState:
    s = plant.x[:STATE_DIM].copy()
    if noise is not None and (noise.zeta_std > 0 or noise.omega_std > 0):
        rng = plant.rng if rng is None else rng
        s[3] += noise.zeta_std * rng.standard_normal()
        s[4] += noise.omega_std * rng.standard_normal()
    return SystemState.from_array(s)


# -- excitation ----------------------------------------------------------------

@dataclass(frozen=True)
class ExcitationSpec:
    """Open-loop input program.

    ``kind``: ``constant`` (v, delta), ``sinusoid`` (delta + amplitude*sin(2 pi freq t)),
    ``chirp`` (linear sweep f0 -> f1 over ``duration``), or ``program``
    (piecewise-linear knots for v and delta plus an optional chirp on delta).
    """

    kind: str = "constant"
    v: float = 0.5
    delta: float = 0.0
    amplitude: float = 0.0
    freq: float = 0.1
    f0: float = 0.02
    f1: float = 0.3
    duration: float = 150.0
    v_knots: tuple[tuple[float, float], ...] = ()
    delta_knots: tuple[tuple[float, float], ...] = ()
    input_lo: tuple[float, float] = (0.0, -0.6)
    input_hi: tuple[float, float] = (1.0, 0.6)


def _chirp(t: float, amp: float, f0: float, f1: float, dur: float) -> float:
    tc = min(max(t, 0.0), dur)
    k = (f1 - f0) / dur
    phase = 2 * math.pi * (f0 * tc + 0.5 * k * tc * tc)
    if t > dur:
        phase += 2 * math.pi * f1 * (t - dur)
    return amp * math.sin(phase)


def excitation_controller(t: float, spec: ExcitationSpec) -> ControlInput:
    if spec.kind == "constant":
        v, d = spec.v, spec.delta
    elif spec.kind == "sinusoid":
        v, d = spec.v, spec.delta + spec.amplitude * math.sin(2 * math.pi * spec.freq * t)
    elif spec.kind == "chirp":
        v, d = spec.v, spec.delta + _chirp(t, spec.amplitude, spec.f0, spec.f1, spec.duration)
    elif spec.kind == "program":
        v = float(np.interp(t, *zip(*spec.v_knots))) if spec.v_knots else spec.v
        d = float(np.interp(t, *zip(*spec.delta_knots))) if spec.delta_knots else spec.delta
        if spec.amplitude:
            d += _chirp(t, spec.amplitude, spec.f0, spec.f1, spec.duration)
    else:
        raise InvalidInputError(f"unknown excitation kind {spec.kind!r}")
    v = min(max(v, spec.input_lo[0]), spec.input_hi[0])
    d = min(max(d, spec.input_lo[1]), spec.input_hi[1])
    return ControlInput(v, d)


def random_excitation(rng: np.random.Generator, duration: float,
                      input_lo=(0.0, -0.6), input_hi=(1.0, 0.6)) -> ExcitationSpec:
    """Random persistently exciting program: held speed levels with ramps,
    steering plateaus of random sign plus a slow chirp."""
    v_lo = max(input_lo[0], 0.15)
    d_max = min(abs(input_lo[1]), abs(input_hi[1]))
    v_knots, d_knots = [(0.0, rng.uniform(v_lo, input_hi[0]))], [(0.0, 0.0)]
    t = 0.0
    while t < duration:
        hold = rng.uniform(3.0, 12.0)
        ramp = rng.uniform(0.5, 3.0)
        v_knots += [(t + ramp, rng.uniform(v_lo, input_hi[0]))]
        t += hold
        v_knots += [(t, v_knots[-1][1])]
    t = 0.0
    while t < duration:
        hold = rng.uniform(1.5, 8.0)
        ramp = rng.uniform(0.05, 2.0)
        level = rng.choice([-1.0, 1.0]) * d_max * rng.uniform(0.0, 0.9) if rng.random() < 0.75 else 0.0
        d_knots += [(t + ramp, level)]
        t += hold
        d_knots += [(t, level)]
    return ExcitationSpec(kind="program", v_knots=tuple(v_knots), delta_knots=tuple(d_knots),
                          amplitude=0.25 * d_max, f0=rng.uniform(0.02, 0.08), f1=rng.uniform(0.2, 0.5),
                          duration=duration, input_lo=tuple(input_lo), input_hi=tuple(input_hi))


# -- datasets ------------------------------------------------------------------

@dataclass
class Trajectory:
    dt: float
    states: np.ndarray  # (T, 5)
    inputs: np.ndarray  # (T - 1, 2)
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, float)
        self.inputs = np.asarray(self.inputs, float)
        if self.dt <= 0:
            raise InvalidInputError("dt must be positive")
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise InvalidInputError("states must be (T, 5)")
        if self.inputs.shape != (len(self.states) - 1, 2):
            raise InvalidInputError("inputs must be (T - 1, 2)")

    def __len__(self) -> int:
        return len(self.states)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema_version: {TRAJECTORY_SCHEMA_VERSION}\n")
            fh.write(f"# dt: {self.dt!r}\n")
            fh.write(f"# split: {self.split}\n")
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for i, s in enumerate(self.states):
                u = self.inputs[i] if i < len(self.inputs) else (None, None)
                w.writerow([repr(i * self.dt), *(repr(float(x)) for x in s),
                            *("" if x is None else repr(float(x)) for x in u)])

    @classmethod
    def load(cls, path) -> "Trajectory":
        meta, rows = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].partition(":")
                    meta[key.strip()] = val.strip()
                    continue
                rows = [line.strip().split(",")] + [r for r in csv.reader(fh)]
                break
        if int(meta.get("schema_version", -1)) != TRAJECTORY_SCHEMA_VERSION:
            raise InvalidInputError(f"{path}: unsupported trajectory schema {meta.get('schema_version')}")
        if tuple(rows[0]) != TRAJECTORY_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected header {rows[0]}")
        body = rows[1:]
        states = np.array([[float(x) for x in r[1:6]] for r in body])
        inputs = np.array([[float(x) for x in r[6:8]] for r in body[:-1]])
        return cls(float(meta["dt"]), states, inputs, split=meta.get("split", "train"))


def simulate(config: PlantConfig, spec: ExcitationSpec | callable, steps: int, dt: float,
             initial: SystemState, seed: int = 0) -> Trajectory:
    """Drive the plant open loop for ``steps`` states (``steps - 1`` inputs)."""
    plant = Plant(config, initial, seed=seed)
    states = [initial.as_array()]
    inputs = []
    for k in range(steps - 1):
        t = k * dt
        u = spec(t) if callable(spec) else excitation_controller(t, spec)
        plant.step(u, dt)
        states.append(plant.x[:STATE_DIM].copy())
        inputs.append(u.as_array())
    return Trajectory(dt, np.array(states), np.array(inputs).reshape(-1, 2))


def split_episodes(n: int, rng: np.random.Generator) -> list[str]:
    """Random 8:1:1 train/val/test tags over ``n`` episodes."""
    n_val = int(round(n * 0.1))
    n_test = int(round(n * 0.1))
    n_train = n - n_val - n_test
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return [tags[i] for i in rng.permutation(n)]


def generate_dataset(configs: list[PlantConfig], episodes: int, steps: int, dt: float, seed: int,
                     min_steps: int = 0) -> list[Trajectory]:
    """``episodes`` trajectories; episode ``i`` uses ``configs[i % len(configs)]``."""
    if steps <= min_steps:
        raise InvalidInputError(f"steps must exceed {min_steps}")
    if not configs:
        raise InvalidInputError("need at least one plant config")
    root = np.random.default_rng(seed)
    tags = split_episodes(episodes, root)
    seeds = root.integers(0, 2**31 - 1, size=episodes)
    out = []
    for i in range(episodes):
        rng = np.random.default_rng(seeds[i])
        cfg = configs[i % len(configs)]
        psi0 = rng.uniform(-math.pi, math.pi)
        init = SystemState((0.0, 0.0), psi0, psi0 + rng.uniform(-0.2, 0.2), 0.0)
        spec = random_excitation(rng, steps * dt)
        traj = simulate(cfg, spec, steps, dt, init, seed=int(seeds[i]))
        traj.split = tags[i]
        traj.meta = {"episode": i, "trailer_kind": cfg.trailer_kind.value, "payload_mass": cfg.payload_mass}
        out.append(traj)
    return out
