"""Closed-loop runs: builtin navigation worlds, the navigation loop and the 8-shape tracking benchmark."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (IPSI, ControlInput, HistoryWindow, SystemGeometry, SystemState, circle_centers_array,
                   trailer_position_array, wrap_angle)
from .globalpath import HybridAStarParams, ReferencePath, hybrid_astar
from .kinmodel import HybridModel, ModelStore, OnlineTrainer, PerformanceMonitor, online_residual_update
from .mpc import Planner, write_diagnostics
from .net import AdamState, MlpNetwork
from .perception import (GridSpec, MovingDisc, ObstacleSet, PerceptionConfig, ScanSpec, World, perceive,
                         rasterize_world)
from .plant import MeasurementNoise, Plant, PlantConfig, TerrainPulse, DisturbanceSpec, observe, trailer_preset

STATE_COLUMNS = ("t", "x_f", "y_f", "psi", "zeta", "omega_zeta", "v", "delta", "x_r", "y_r")


# -- worlds -------------------------------------------------------------------------------------

def _corridor_slalom() -> World:
    return World(segments=[[-1, -2.5, 17, -2.5], [-1, 2.5, 17, 2.5]],
                 discs=[[4.0, 0.8, 0.3], [8.0, -0.9, 0.3], [11.5, 0.9, 0.25]],
                 moving=(_walker(start=(13.0, -2.2), end=(13.0, 2.2), t0=11.0, speed=0.6),),
                 extent=(-2, -3.5, 18, 3.5))


def _l_turn() -> World:
    return World(segments=[[-1, -2.0, 12.0, -2.0], [12.0, -2.0, 12.0, 12.0],
                           [-1, 2.0, 8.0, 2.0], [8.0, 2.0, 8.0, 12.0]],
                 discs=[[5.0, -0.7, 0.3], [10.6, 6.0, 0.3]],
                 moving=(_walker(start=(7.0, -1.7), end=(7.0, 1.7), t0=2.0, speed=0.6),),
                 extent=(-2, -3, 13, 13))


def _plaza() -> World:
    return World(segments=[[-1, -4, 16, -4], [-1, 4, 16, 4]],
                 discs=[[3.5, 0.2, 0.35], [6.5, -1.8, 0.3], [6.8, 1.6, 0.3], [10.0, 0.0, 0.4]],
                 moving=(_walker(start=(12.5, 3.5), end=(12.5, -3.5), t0=8.0, speed=0.6),),
                 extent=(-2, -5, 17, 5))


def _walker(start, end, t0: float, speed: float, radius: float = 0.3):
    # scripted crossings finish a few meters ahead of the vehicle's nominal arrival
    dur = math.hypot(end[0] - start[0], end[1] - start[1]) / speed
    return MovingDisc(radius, ((0.0, *start), (t0, *start), (t0 + dur, *end), (t0 + dur + 1e3, *end)))


@dataclass(frozen=True)
class NavScenario:
    name: str
    world: World
    start: tuple[float, float, float]
    goal: tuple[float, float, float]
    plant: PlantConfig
    timeout: float = 120.0


def builtin_scenarios(geom: SystemGeometry = SystemGeometry()) -> dict[str, NavScenario]:
    pulses = DisturbanceSpec((0.0, 0.0, 0.0, 0.0, 0.002),
                             (TerrainPulse(6.0, 2.0, 0.25), TerrainPulse(14.0, 2.0, -0.25)))
    noise = DisturbanceSpec((0.0, 0.0, 0.0, 0.0, 0.002))
    return {
        "rigid": NavScenario("rigid", _corridor_slalom(), (0.0, 0.0, 0.0), (15.0, 0.0, 0.0),
                             trailer_preset("rigid_rear_castor_front", 5.0, geom=geom, disturbance=noise)),
        "castor": NavScenario("castor", _l_turn(), (0.0, 0.0, 0.0), (10.0, 10.0, math.pi / 2),
                              trailer_preset("all_castor", 5.0, geom=geom, disturbance=noise)),
        "castor_payload": NavScenario("castor_payload", _l_turn(), (0.0, 0.0, 0.0), (10.0, 10.0, math.pi / 2),
                                      trailer_preset("all_castor", 30.0, geom=geom, disturbance=noise)),
        "wheelless": NavScenario("wheelless", _plaza(), (0.0, 0.0, 0.0), (14.5, 0.0, 0.0),
                                 trailer_preset("wheelless_drag", 0.0, geom=geom, disturbance=noise)),
        "terrain": NavScenario("terrain", _corridor_slalom(), (0.0, 0.0, 0.0), (15.0, 0.0, 0.0),
                               trailer_preset("all_castor", 5.0, geom=geom, disturbance=pulses)),
    }


# -- ground-truth collision ------------------------------------------------------------------------

def true_clearance(state: np.ndarray, world: World, t: float, geom: SystemGeometry) -> float:
    """Smallest gap between any covering circle and any world shape (negative = intersection)."""
    veh, trl = circle_centers_array(state, geom)
    centers = np.vstack((veh, trl))
    radii = np.array([geom.r_f] * len(veh) + [geom.r_r] * len(trl))
    best = math.inf
    discs = world.discs_at(t)
    if len(discs):
        d = np.linalg.norm(centers[:, None] - discs[None, :, :2], axis=-1) - radii[:, None] - discs[None, :, 2]
        best = min(best, float(d.min()))
    for x1, y1, x2, y2 in world.segments:
        a, e = np.array([x1, y1]), np.array([x2 - x1, y2 - y1])
        ee = float(e @ e)
        s = np.clip((centers - a) @ e / ee, 0, 1) if ee > 0 else np.zeros(len(centers))
        d = np.linalg.norm(centers - (a + s[:, None] * e), axis=1) - radii
        best = min(best, float(d.min()))
    return best


# -- shared loop pieces ------------------------------------------------------------------------------

@dataclass
class LoopSettings:
    n_e: int = 15
    epsilon: float = 0.5
    trainer: OnlineTrainer = field(default_factory=OnlineTrainer)
    residual_every: int = 1
    measurement: MeasurementNoise = field(default_factory=MeasurementNoise)


class _Adapter:
    """Monitor plus online residual trainer fed from the measured log."""

    def __init__(self, model: HybridModel, settings: LoopSettings, adapt: bool):
        self.store = ModelStore(model)
        self.settings = settings
        self.monitor = PerformanceMonitor(settings.n_e, settings.epsilon, model.n_f)
        tr = settings.trainer
        self.adam = AdamState(lr_initial=tr.adam.lr_initial, lr_final=tr.adam.lr_final)
        self.adapt = adapt
        self.S: list[np.ndarray] = []
        self.U: list[np.ndarray] = []

    def observe(self, x: np.ndarray, u: np.ndarray, cycle: int) -> None:
        self.S.append(x)
        self.monitor.push(x, u)
        tr = self.settings.trainer
        n_f = self.store.snapshot().n_f
        if not self.adapt or cycle % self.settings.residual_every or len(self.S) < n_f + tr.horizon + 1:
            return
        lo = max(0, len(self.S) - 1 - tr.n_t)
        S = np.array(self.S[lo:])
        U = np.array(self.U[lo:len(self.S) - 1]).reshape(-1, 2)
        model = self.store.snapshot()
        self.store.publish_residual(online_residual_update(S, U, model, self.adam, tr.budget, tr.horizon))

    def applied(self, u: np.ndarray) -> None:
        self.U.append(np.asarray(u, float))


def _row(t, x, u, geom):
    xr = trailer_position_array(x, geom)
    return [t, *x, *u, *xr]


def _save_rows(path, rows) -> None:
    np.savetxt(path, np.array(rows).reshape(-1, len(STATE_COLUMNS)), fmt="%.9g", delimiter=",",
               header=",".join(STATE_COLUMNS), comments="")


# -- navigation ---------------------------------------------------------------------------------------

@dataclass
class NavResult:
    name: str
    success: bool
    reason: str
    sim_time: float
    rows: list
    diagnostics: list
    events: list
    path: ReferencePath | None
    min_true_clearance: float
    min_planned_dfr: float
    wall_time: float
    mean_solve_time: float
    residual: MlpNetwork | None = None

    def summary(self) -> dict:
        return {"scenario": self.name, "success": self.success, "reason": self.reason,
                "sim_time": round(self.sim_time, 6), "cycles": len(self.diagnostics),
                "min_true_clearance": _finite(self.min_true_clearance),
                "min_planned_dfr": _finite(self.min_planned_dfr),
                "collisions": sum(1 for e in self.events if e["event"] == "collision"),
                "s_e_activations": sum(1 for e in self.events if e["event"] == "s_e_on"),
                "mean_solve_time": self.mean_solve_time}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _save_rows(out / "trajectory.csv", self.rows)
        write_diagnostics(self.diagnostics, out / "diagnostics.jsonl")
        write_diagnostics(self.events, out / "events.jsonl")
        if self.path is not None:
            self.path.save(out / "path.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _finite(x):
    return float(x) if math.isfinite(x) else None


def run_navigation(scn: NavScenario, model: HybridModel, planner: Planner,
                   perception: PerceptionConfig = PerceptionConfig(), settings: LoopSettings = LoopSettings(),
                   goal_tol_xy: float = 0.2, goal_tol_psi: float = 0.2, grid_resolution: float = 0.1,
                   obstacle_range: float = 6.0, seed: int = 0, log=None) -> NavResult:
    """Perception, monitor, residual updates, hybrid A* and MPC at 10 Hz simulated time."""
    t_wall = time.perf_counter()
    geom, dt = model.geom, model.dt
    x0 = SystemState(scn.start[:2], scn.start[2], scn.start[2], 0.0)
    plant = Plant(scn.plant, x0, seed=seed)
    rng = np.random.default_rng(seed + 1)
    goal = np.asarray(scn.goal, float)
    events, rows = [], []

    def reached(x):
        return (math.hypot(x[0] - goal[0], x[1] - goal[1]) <= goal_tol_xy
                and abs(wrap_angle(x[IPSI] - goal[2])) <= goal_tol_psi)

    x = observe(plant, settings.measurement, rng).as_array()
    if reached(x):
        rows.append(_row(0.0, x, (0.0, 0.0), geom))
        events.append({"t": 0.0, "event": "goal"})
        return NavResult(scn.name, True, "goal", 0.0, rows, [], events, None, true_clearance(x, scn.world, 0.0, geom),
                         math.inf, time.perf_counter() - t_wall, 0.0)

    grid = rasterize_world(scn.world, GridSpec.covering(scn.world.extent, grid_resolution))
    astar = hybrid_astar(grid, scn.start, scn.goal, geom, HybridAStarParams(steer_max=planner.bounds.input_hi[1]))
    path = astar.path
    events.append({"t": 0.0, "event": "global_path", "length": path.length, "expanded": astar.expanded})

    adapter = _Adapter(model, settings, adapt=planner.use_residual)
    u_now = np.zeros(2)
    history = HistoryWindow.constant(x, u_now, model.n_f)
    min_clear, min_dfr = math.inf, math.inf
    reason, success = "timeout", False
    prev_se = 0
    n_cycles = int(round(scn.timeout / dt))
    t = 0.0
    for cycle in range(n_cycles + 1):
        t = cycle * dt
        truth = plant.x[:5].copy()
        clear = true_clearance(truth, scn.world, t, geom)
        min_clear = min(min_clear, clear)
        if clear < 0:
            events.append({"t": t, "event": "collision", "clearance": clear})
            rows.append(_row(t, x, u_now, geom))
            reason = "collision"
            break
        if reached(x):
            rows.append(_row(t, x, u_now, geom))
            events.append({"t": t, "event": "goal"})
            reason, success = "goal", True
            break
        if cycle == n_cycles:
            rows.append(_row(t, x, u_now, geom))
            break
        adapter.observe(x, u_now, cycle)
        pose = (truth[0], truth[1], truth[IPSI])
        _, obs = perceive(scn.world, pose, t, perception)
        if len(obs):
            keep = np.hypot(*(obs.centers - truth[:2]).T) <= obstacle_range
            obs = ObstacleSet(obs.centers[keep], obs.radii[keep])
        u_plan, sol, rec = planner.plan_cycle(history, obs, adapter.monitor, adapter.store.snapshot(), path, t)
        rec["n_obs"] = len(obs)
        min_dfr = min(min_dfr, sol.min_dfr)
        if rec["s_e"] != prev_se:
            events.append({"t": t, "event": "s_e_on" if rec["s_e"] else "s_e_off"})
            prev_se = rec["s_e"]
        if rec["fallback"]:
            events.append({"t": t, "event": "fallback", "max_violation": sol.max_violation})
        rows.append(_row(t, x, u_now, geom))
        plant.step(ControlInput(*u_now), dt)
        adapter.applied(u_now)
        x = observe(plant, settings.measurement, rng).as_array()
        u_now = np.array([u_plan.v, u_plan.delta])
        history = history.shifted(x, u_now)
        if log is not None and cycle % 50 == 0:
            log(f"{scn.name} t={t:.1f} pos=({x[0]:.2f},{x[1]:.2f}) s_e={rec['s_e']} dfr={sol.min_dfr:.3f}")
    diag = planner.records
    mean_solve = float(np.mean([r["solve_time"] for r in diag])) if diag else 0.0
    return NavResult(scn.name, success, reason, t, rows, list(diag), events, path, min_clear, min_dfr,
                     time.perf_counter() - t_wall, mean_solve, adapter.store.snapshot().residual_net)


# -- tracking benchmark ----------------------------------------------------------------------------------

def lemniscate(t, amplitude: float, period: float):
    """Figure-eight ``(A sin p, A sin p cos p)`` with ``p = 2 pi t / period``; returns positions and headings."""
    p = 2 * np.pi * np.asarray(t, float) / period
    w = 2 * np.pi / period
    pos = np.stack((amplitude * np.sin(p), amplitude * np.sin(p) * np.cos(p)), -1)
    vel = np.stack((amplitude * w * np.cos(p), amplitude * w * np.cos(2 * p)), -1)
    heading = np.arctan2(vel[..., 1], vel[..., 0])
    return pos, heading


@dataclass
class TrackResult:
    mode: str
    errors: np.ndarray
    rows: list
    diagnostics: list
    residual: MlpNetwork | None = None

    @property
    def stats(self) -> dict:
        e = self.errors
        return {"mean": float(e.mean()), "std": float(e.std()), "max": float(e.max())}


def run_tracking(model: HybridModel, plant_cfg: PlantConfig, planner: Planner, amplitude: float = 3.0,
                 period: float = 60.0, laps: float = 1.0, settings: LoopSettings = LoopSettings(),
                 seed: int = 0, mode: str = "weighted") -> TrackResult:
    """Trailer follows a time-indexed figure-eight; obstacle terms are dropped."""
    geom, dt, N = model.geom, model.dt, planner.N
    _, h0 = lemniscate(0.0, amplitude, period)
    h0 = float(h0) if amplitude > 0 else 0.0
    xr0 = np.zeros(2)
    xf0 = xr0 + (geom.l_fh + geom.l_hr) * np.array([math.cos(h0), math.sin(h0)])
    plant = Plant(plant_cfg, SystemState(tuple(xf0), h0, h0, 0.0), seed=seed)
    rng = np.random.default_rng(seed + 1)
    adapter = _Adapter(model, settings, adapt=mode == "weighted")
    x = observe(plant, settings.measurement, rng).as_array()
    u_now = np.zeros(2)
    history = HistoryWindow.constant(x, u_now, model.n_f)
    empty = ObstacleSet()
    errors, rows = [], []
    steps = int(round(laps * period / dt))
    lead = geom.l_fh + geom.l_hr
    for cycle in range(steps):
        t = cycle * dt
        truth = plant.x[:5].copy()
        ref_t, _ = lemniscate(t, amplitude, period)
        errors.append(float(np.hypot(*(trailer_position_array(truth, geom) - ref_t))))
        adapter.observe(x, u_now, cycle)
        ref, hd = lemniscate(t + dt * np.arange(N + 1), amplitude, period)
        if amplitude > 0:
            psi_end = float(x[IPSI] + wrap_angle(hd[-1] - x[IPSI]))
        else:
            psi_end = float(x[IPSI])
        xf_end = ref[-1] + lead * np.array([math.cos(psi_end), math.sin(psi_end)])
        x_ter = np.array([xf_end[0], xf_end[1], psi_end, psi_end, 0.0])
        u_plan, sol, rec = planner.plan(history, empty, adapter.monitor, adapter.store.snapshot(), ref, x_ter, t)
        rows.append(_row(t, x, u_now, geom))
        plant.step(ControlInput(*u_now), dt)
        adapter.applied(u_now)
        x = observe(plant, settings.measurement, rng).as_array()
        u_now = np.array([u_plan.v, u_plan.delta])
        history = history.shifted(x, u_now)
    return TrackResult(mode, np.array(errors), rows, list(planner.records), adapter.store.snapshot().residual_net)
