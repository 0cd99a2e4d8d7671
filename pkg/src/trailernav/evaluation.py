"""Open-loop model evaluation: multi-step rolling RMSE with online residual learning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ControlInput, SystemState
from .kinmodel import (HybridModel, OnlineTrainer, PerformanceMonitor, lambda_e, mode_weights,
                       online_residual_update, rolling_predict, step_array, update_monitor)
from .net import AdamState
from .plant import MeasurementNoise, PlantConfig, Trajectory, random_excitation, simulate


def multi_turn_program(v: float = 0.5, delta: float = 0.45, straight: float = 6.0, turns: int = 8,
                       geom_l: float = 0.55, pattern=(1, 1, -1, -1)):
    """Inputs for a route of straights joined by 90-degree turns."""
    turn_time = (math.pi / 2) / (v * math.tan(delta) / geom_l)
    segs = []
    for i in range(turns):
        segs.append((straight, 0.0))
        segs.append((turn_time, pattern[i % len(pattern)] * delta))
    segs.append((straight, 0.0))
    bounds = np.cumsum([s[0] for s in segs])

    def program(t: float) -> ControlInput:
        i = int(np.searchsorted(bounds, t, side="right"))
        return ControlInput(v, segs[min(i, len(segs) - 1)][1])

    return program, float(bounds[-1])


@dataclass
class EvalResult:
    steps: np.ndarray
    rmse: dict  # mode -> (N,) array
    s_e: np.ndarray
    starts: np.ndarray
    meta: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = ["step," + ",".join(self.rmse)]
        for i, k in enumerate(self.steps):
            lines.append(f"{k}," + ",".join(f"{self.rmse[m][i]:.6f}" for m in self.rmse))
        return "\n".join(lines) + "\n"


def evaluate_model(model: HybridModel, plant: PlantConfig, N: int = 30, n_e: int = 15, epsilon: float = 0.5,
                   trainer: OnlineTrainer | None = None, seed: int = 0, trajectory: Trajectory | None = None,
                   warmup: int = 60, modes=("nominal", "unweighted", "weighted"),
                   measurement: MeasurementNoise | None = None) -> EvalResult:
    """Roll 1..N steps from every time index of an evaluation run under each mode.

    The residual net is trained online on the trailing ``n_t`` frames before each
    prediction and the switch comes from the monitor at that time. ``measurement``
    corrupts the recorded zeta and omega (learning and targets alike).
    """
    trainer = trainer or OnlineTrainer()
    adam = AdamState(lr_initial=trainer.adam.lr_initial, lr_final=trainer.adam.lr_final)
    if trajectory is None:
        program, duration = multi_turn_program(geom_l=plant.geom.l)
        steps = int(duration / model.dt) + 1
        trajectory = simulate(plant, program, steps, model.dt, SystemState((0.0, 0.0), 0.0, 0.0, 0.0), seed=seed)
    S, U = trajectory.states, trajectory.inputs
    if measurement is not None:
        rng = np.random.default_rng(seed + 1)
        S = S.copy()
        S[:, 3] += measurement.zeta_std * rng.standard_normal(len(S))
        S[:, 4] += measurement.omega_std * rng.standard_normal(len(S))
    T = len(S)
    n_f = model.n_f
    monitor = PerformanceMonitor(n_e, epsilon, n_f)
    sq = {m: np.zeros(N) for m in modes}
    count = 0
    switches, starts = [], []
    for t in range(T - N):
        monitor.push(S[t], U[t])
        if t < n_f + trainer.horizon + 1:
            continue
        lo = max(0, t - trainer.n_t)
        net = online_residual_update(S[lo:t + 1], U[lo:t], model, adam, trainer.budget, trainer.horizon)
        model = model.with_residual(net)
        _, _, _, s_e = update_monitor(monitor, model)
        m = model.with_switch(s_e)
        if t < warmup:
            continue
        seed_states = S[None, t - n_f:t + 1]
        inputs = U[None, t - n_f:t + N]
        target = S[None, t + 1:t + N + 1, 4]
        for mode in modes:
            pred = rolling_predict(seed_states, inputs, N, m, mode_weights(mode, m, N))
            sq[mode] += (pred[0] - target[0]) ** 2
        count += 1
        switches.append(m.s_e)
        starts.append(t)
    rmse = {mode: np.sqrt(sq[mode] / max(count, 1)) for mode in modes}
    return EvalResult(np.arange(1, N + 1), rmse, np.array(switches), np.array(starts),
                      meta={"samples": count})


@dataclass
class AdaptationResult:
    first_on: int | None  # first cycle with s_e = 1
    one_step_error: float  # mean |weighted 1-step omega error| over the final n_e steps
    s_e: np.ndarray


def adaptation_run(model: HybridModel, plant: PlantConfig, cycles: int = 100, n_e: int = 15, epsilon: float = 0.5,
                   trainer: OnlineTrainer | None = None, seed: int = 0) -> AdaptationResult:
    """Open-loop excitation of a disturbed plant with the monitor and online residual learning in the loop."""
    trainer = trainer or OnlineTrainer()
    adam = AdamState(lr_initial=trainer.adam.lr_initial, lr_final=trainer.adam.lr_final)
    rng = np.random.default_rng(seed)
    spec = random_excitation(rng, (cycles + 1) * model.dt)
    psi0 = rng.uniform(-math.pi, math.pi)
    tr = simulate(plant, spec, cycles + 1, model.dt, SystemState((0.0, 0.0), psi0, psi0, 0.0), seed=seed)
    S, U = tr.states, tr.inputs
    n_f = model.n_f
    monitor = PerformanceMonitor(n_e, epsilon, n_f)
    switches = []
    for t in range(cycles):
        monitor.push(S[t], U[t])
        if t >= n_f + trainer.horizon + 1:
            lo = max(0, t - trainer.n_t)
            model = model.with_residual(online_residual_update(S[lo:t + 1], U[lo:t], model, adam, trainer.budget,
                                                               trainer.horizon))
        switches.append(update_monitor(monitor, model)[3])
    m = model.with_switch(switches[-1])
    errs = [abs(step_array(S[t - n_f:t + 1], U[t - n_f:t + 1], m, lambda_e(0, m))[4] - S[t + 1, 4])
            for t in range(cycles - n_e, cycles)]
    on = [i for i, s in enumerate(switches) if s]
    return AdaptationResult(on[0] if on else None, float(np.mean(errs)), np.array(switches))
