"""Acceptance criteria 1-10, each at its stated tolerance and runtime budget."""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from test_kinmodel import tiny_batch
from test_mpc import constraint_violation, random_problem
from test_net import fd_param_grads, rel_err
from test_perception import brute_force_dbscan
from trailernav.cli import build_model, cmd_track, loop_settings, make_planner
from trailernav.config import ScenarioConfig, load_config
from trailernav.core import HistoryWindow
from trailernav.evaluation import adaptation_run, evaluate_model
from trailernav.globalpath import HybridAStarParams, grid_lower_bound, hybrid_astar
from trailernav.kinmodel import (HybridModel, default_nets, feature_size, lambda_e, nominal_step, rolling_predict,
                                 split_sample, weighted_step)
from trailernav.mpc import Planner, solve
from trailernav.net import MlpNetwork
from trailernav.perception import GridSpec, dbscan, rasterize_world
from trailernav.plant import DisturbanceSpec, MeasurementNoise, trailer_preset
from trailernav.scenarios import builtin_scenarios, run_navigation

CFG = load_config()


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_parameter_fidelity():
    c = ScenarioConfig()
    m = c.model
    model = build_model(c)
    got = dict(N=m.N, dt=m.dt, n_f=m.n_f, nominal=tuple(model.nominal_net.layer_sizes[1:-1]),
               residual=tuple(model.residual_net.layer_sizes[1:-1]), batch=m.batch_size, lr=(m.lr_initial, m.lr_final),
               n_t=m.n_t, n_e=m.n_e, epsilon=m.epsilon, n_c=m.n_c)
    want = dict(N=30, dt=0.1, n_f=3, nominal=(64, 32, 16), residual=(32, 16), batch=256, lr=(1e-2, 1e-5),
                n_t=200, n_e=15, epsilon=0.5, n_c=15)
    # hidden activation is tanh: a single-unit chain reproduces tanh(tanh(x))
    unit = MlpNetwork([1, 1, 1], [[[1.0]], [[1.0]]], [[0.0], [0.0]])
    ok = got == want and unit.forward([0.3]) == pytest.approx(math.tanh(0.3))
    report(1, ok, f"config {got}")


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    nom, res = default_nets(3, seed=1)
    worst = 0.0
    for net in (nom, res):
        for b in net.biases:
            b[:] = rng.normal(0, 0.3, b.shape)
        net.weights[-1][:] = rng.normal(0, 0.3, net.weights[-1].shape)
        x = rng.normal(size=net.n_inputs)
        for a, b in zip(net.backward(x), fd_param_grads(net, x)):
            worst = max(worst, rel_err(a, b))
        h = 1e-5
        fd = np.array([(net.forward(x + h * e) - net.forward(x - h * e)) / (2 * h) for e in np.eye(net.n_inputs)])
        worst = max(worst, rel_err(net.input_jacobian(x), fd))
    n_f, N = 1, 3
    toy_rng = np.random.default_rng(8)
    m = HybridModel(MlpNetwork.initialize([feature_size(n_f), 4, 3, 1], toy_rng),
                    MlpNetwork.initialize([feature_size(n_f), 3, 1], toy_rng), n_f=n_f, s_e=1)
    seed, u, tgt = split_sample(*tiny_batch(toy_rng, n_f, N), n_f, N)
    lams = np.array([1.0, 0.6, 0.2])
    for trainable, net in (("nominal", m.nominal_net), ("residual", m.residual_net)):
        grads = rolling_predict(seed, u, N, m, lams, trainable=trainable, targets=tgt)[2]
        fd = []
        for p in net.params():
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-6
                lp = rolling_predict(seed, u, N, m, lams, targets=tgt)[1]
                p[idx] = old - 1e-6
                lm = rolling_predict(seed, u, N, m, lams, targets=tgt)[1]
                p[idx] = old
                g[idx] = (lp - lm) / 2e-6
            fd.append(g)
        worst = max(worst, max(rel_err(a, b) for a, b in zip(grads, fd)))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-4 and dt < 10, f"max relative error {worst:.2e} (tol 1e-4), runtime {dt:.1f} s (< 10)")


def test_criterion_3_model_structure():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    base = build_model(CFG)
    res = MlpNetwork.deserialize(base.residual_net.serialize())
    res.weights[-1][:] = rng.normal(0, 0.3, res.weights[-1].shape)
    model = base.with_residual(res)
    ok = lambda_e(0, model.with_switch(1)) == 1 and lambda_e(0, model.with_switch(0)) == 0
    ok &= lambda_e(model.n_c, model.with_switch(1)) == 0
    for _ in range(100):
        w = HistoryWindow(np.column_stack((rng.normal(0, 2, (4, 2)), rng.normal(0, 0.5, (4, 3)))),
                          np.column_stack((rng.uniform(0, 1, 4), rng.uniform(-0.6, 0.6, 4))))
        a = nominal_step(w, model).as_array()
        k = int(rng.integers(0, 40))
        ok &= np.array_equal(weighted_step(w, model.with_switch(0), k).as_array(), a)
        b = weighted_step(w, model.with_switch(1), k).as_array()
        ok &= np.array_equal(b[:4], a[:4])
        if k >= model.n_c:
            ok &= np.array_equal(b, a)
    dt = time.perf_counter() - t0
    report(3, bool(ok) and dt < 1, f"invariants hold on 100 random windows, runtime {dt:.2f} s (< 1)")


def test_criterion_4_rolling_rmse_direction():
    t0 = time.perf_counter()
    ec, mc = CFG.eval, CFG.model
    model = build_model(CFG)
    res = evaluate_model(model, trailer_preset(ec.kind, ec.payload, geom=model.geom), mc.N, mc.n_e, mc.epsilon,
                         loop_settings(CFG).trainer, CFG.seed, warmup=ec.warmup,
                         measurement=MeasurementNoise(ec.zeta_noise_std, ec.omega_noise_std))
    n, u, w = res.rmse["nominal"], res.rmse["unweighted"], res.rmse["weighted"]
    below = bool(np.all(w[:15] < n[:15]))
    cross = bool(np.any(u[14:] > n[14:]))
    dt = time.perf_counter() - t0
    report(4, below and cross and dt < 300,
           f"weighted < nominal at steps 1..15: {below} (min margin {np.min(n[:15] - w[:15]):.4f}); "
           f"unweighted > nominal at some step >= 15: {cross} (max excess {np.max(u[14:] - n[14:]):.4f}); "
           f"runtime {dt:.0f} s (< 300)")


def test_criterion_5_tracking_direction(tmp_path):
    t0 = time.perf_counter()
    rep = cmd_track(CFG, tmp_path)
    nom, wtd = rep["nominal"], rep["weighted"]
    dt = time.perf_counter() - t0
    ok = wtd["mean"] <= 0.95 * nom["mean"] and wtd["max"] <= nom["max"] and dt < 300
    report(5, ok, f"mean {wtd['mean']:.3f} vs {nom['mean']:.3f} m (ratio {wtd['mean'] / nom['mean']:.2f} <= 0.95), "
                  f"max {wtd['max']:.3f} vs {nom['max']:.3f} m, runtime {dt:.0f} s (< 300)")


def test_criterion_6_solver_suite():
    t0 = time.perf_counter()
    worst, converged, monotone = 0.0, 0, True
    for seed in range(100):
        problem, _ = random_problem(1000 + seed)
        sol = solve(problem)
        for (r0, m0), (r1, m1) in zip(sol.merit_history, sol.merit_history[1:]):
            monotone &= r0 != r1 or m1 <= m0 * (1 + 1e-12)
        if sol.converged:
            converged += 1
            worst = max(worst, constraint_violation(problem, sol))
    n_in = feature_size(3)
    still = HybridModel(MlpNetwork.zeros([n_in, 8, 1]), MlpNetwork.zeros([n_in, 8, 1]))
    from test_mpc import stationary_problem
    zero = solve(stationary_problem(still), np.tile([0.6, 0.3], (5, 1)))
    u_max = float(np.max(np.abs(zero.inputs)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and monotone and u_max <= 1e-4 and converged > 0 and dt < 60
    report(6, ok, f"{converged}/100 converged, worst violation {worst:.1e} (<= 1e-3), merit monotone {monotone}, "
                  f"stationary |u| {u_max:.1e} (<= 1e-4), runtime {dt:.1f} s (< 60)")


class TimedPlanner(Planner):
    """Records the wall time of every full plan_cycle call."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.cycle_times = []

    def plan_cycle(self, *a, **kw):
        t0 = time.perf_counter()
        out = super().plan_cycle(*a, **kw)
        self.cycle_times.append(time.perf_counter() - t0)
        return out


@pytest.fixture(scope="module")
def navigation_runs():
    out = {}
    t0 = time.perf_counter()
    scenarios = builtin_scenarios()
    for name in ("rigid", "castor", "castor_payload", "wheelless"):
        base = make_planner(CFG, use_residual=True)
        planner = TimedPlanner(base.weights, base.bounds, base.options, base.N, base.v_ref, base.use_residual)
        res = run_navigation(scenarios[name], build_model(CFG), planner, settings=loop_settings(CFG), seed=CFG.seed)
        out[name] = (res, planner.cycle_times)
    return out, time.perf_counter() - t0


def test_criterion_7_navigation_safety(navigation_runs):
    runs, wall = navigation_runs
    parts, ok = [], wall < 600
    for name, (res, _) in runs.items():
        s = res.summary()
        good = s["success"] and s["collisions"] == 0 and res.min_planned_dfr >= -1e-3
        ok &= good
        parts.append(f"{name}: {'ok' if good else 'FAIL'} ({s['reason']}, collisions {s['collisions']}, "
                     f"min planned d_fr {res.min_planned_dfr:+.4f} m)")
    report(7, ok, "; ".join(parts) + f"; runtime {wall:.0f} s (< 600)")


def test_criterion_8_online_adaptation():
    model = build_model(CFG)
    plant = trailer_preset("rigid_rear_castor_front", 0.0, geom=model.geom, disturbance=DisturbanceSpec(constant_bias=0.1))
    runs = [adaptation_run(model, plant, 100, CFG.model.n_e, CFG.model.epsilon, loop_settings(CFG).trainer, seed)
            for seed in range(5)]
    first = np.median([r.first_on if r.first_on is not None else math.inf for r in runs])
    err = float(np.median([r.one_step_error for r in runs]))
    report(8, first < 100 and err < 0.02,
           f"median first s_e=1 at cycle {first:.0f} (< 100), median 1-step error {err:.4f} rad/s (< 0.02)")


def test_criterion_9_latency(navigation_runs):
    runs, _ = navigation_runs
    times = np.concatenate([t for _, t in runs.values()])
    mean = float(np.mean(times))
    report(9, mean < 0.1, f"mean plan_cycle {1e3 * mean:.1f} ms over {len(times)} cycles at N={CFG.model.N} (< 100 ms)")


def test_criterion_10_oracle_equivalence():
    same = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        k = int(rng.integers(1, 6))
        pts = rng.uniform(0, 10, (k, 2))[rng.integers(0, k, n)] + rng.normal(0, rng.uniform(0.1, 0.8), (n, 2))
        eps, min_pts = float(rng.uniform(0.2, 0.8)), int(rng.integers(1, 6))
        same += np.array_equal(dbscan(pts, eps, min_pts), brute_force_dbscan(pts, eps, min_pts))
    bound_ok = []
    for name, scn in builtin_scenarios().items():
        grid = rasterize_world(scn.world, GridSpec.covering(scn.world.extent, 0.1))
        res = hybrid_astar(grid, scn.start, scn.goal, params=HybridAStarParams())
        bound_ok.append(res.cost >= grid_lower_bound(grid, scn.start[:2], scn.goal[:2]))
    report(10, same == 100 and all(bound_ok),
           f"DBSCAN identical on {same}/100 instances; A* cost >= grid bound on {sum(bound_ok)}/{len(bound_ok)} worlds")
