"""Command-line harness: data collection, offline training, model evaluation, tracking and navigation.

Every verb reads one YAML config (``--config``), writes plain-text results under
``--out`` and is reproducible from (config, seed).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ScenarioConfig, config_schema, load_config
from .core import InvalidInputError
from .evaluation import evaluate_model
from .kinmodel import HybridModel, OnlineTrainer, default_nets, fit_nominal, fit_normalizer_from
from .mpc import Planner, write_diagnostics
from .net import AdamState, MlpNetwork, WeightFileError
from .perception import PerceptionConfig, ScanSpec, World
from .plant import MeasurementNoise, Trajectory, generate_dataset, trailer_preset
from .scenarios import LoopSettings, NavScenario, builtin_scenarios, run_navigation, run_tracking

log = logging.getLogger("trailernav")

DEFAULT_NOMINAL = "nominal_default.txt"


class CliError(RuntimeError):
    pass


# -- model assembly -------------------------------------------------------------------------------

def default_nominal_path() -> Path:
    return Path(str(resources.files("trailernav") / "data" / DEFAULT_NOMINAL))


def build_model(cfg: ScenarioConfig, reset_residual: bool = False, untrained: bool = False) -> HybridModel:
    """Nominal net from the config (or the packaged default), residual from the config unless reset.

    A fresh residual is zero at the output and shares the nominal's input normalisation.
    """
    mc = cfg.model
    nom, res = default_nets(mc.n_f, mc.nominal_hidden, mc.residual_hidden, seed=cfg.seed)
    if not untrained:
        path = Path(cfg.nominal_weights) if cfg.nominal_weights else default_nominal_path()
        nom = _load_net(path)
    res.mean, res.scale = nom.mean.copy(), nom.scale.copy()
    if cfg.residual_weights and not reset_residual:
        res = _load_net(Path(cfg.residual_weights))
    return HybridModel(nom, res, cfg.geometry.build(), mc.dt, mc.n_f, mc.n_c)


def _load_net(path: Path) -> MlpNetwork:
    try:
        return MlpNetwork.load(path)
    except (OSError, WeightFileError) as exc:
        raise CliError(f"cannot load weights from {path}: {exc}") from exc


def loop_settings(cfg: ScenarioConfig, measurement: MeasurementNoise | None = None) -> LoopSettings:
    mc = cfg.model
    trainer = OnlineTrainer(mc.n_t, mc.residual_horizon, mc.residual_budget,
                            AdamState(lr_initial=mc.residual_lr, lr_final=mc.residual_lr))
    return LoopSettings(mc.n_e, mc.epsilon, trainer, mc.residual_every, measurement or MeasurementNoise())


def make_planner(cfg: ScenarioConfig, use_residual: bool, track_trailer: bool = False,
                 v_ref: float | None = None) -> Planner:
    return Planner(cfg.weights.build(track_trailer), cfg.bounds.build(), cfg.solver.build(), cfg.model.N,
                   cfg.navigate.v_ref if v_ref is None else v_ref, use_residual)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- verbs ----------------------------------------------------------------------------------------

def cmd_collect(cfg: ScenarioConfig, out) -> list[Path]:
    """Excitation episodes across the configured trailer kinds and payloads, plus a split manifest."""
    cc, mc = cfg.collect, cfg.model
    geom = cfg.geometry.build()
    plants = [trailer_preset(k, p, geom=geom) for k in cc.kinds for p in cc.payloads]
    data = generate_dataset(plants, cc.episodes, cc.steps, mc.dt, cfg.seed, min_steps=cc.min_steps - 1)
    out = _out_dir(out)
    files = []
    manifest = {"seed": cfg.seed, "dt": mc.dt, "steps": cc.steps, "episodes": []}
    for traj in data:
        name = f"episode_{traj.meta['episode']:03d}.csv"
        try:
            traj.save(out / name)
        except OSError as exc:
            raise CliError(f"cannot write {out / name}: {exc}") from exc
        files.append(out / name)
        manifest["episodes"].append({"file": name, "split": traj.split, **traj.meta})
    _write_json(out / "manifest.json", manifest)
    return files


def load_dataset(data_dir) -> dict[str, list[Trajectory]]:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.is_file():
        raise CliError(f"no manifest.json in {data_dir}")
    manifest = json.loads(mpath.read_text())
    splits = {"train": [], "val": [], "test": []}
    for ep in manifest["episodes"]:
        traj = Trajectory.load(data_dir / ep["file"])
        splits.setdefault(ep["split"], []).append(traj)
    return splits


def cmd_train_nominal(cfg: ScenarioConfig, data_dir, out, epochs: int | None = None) -> dict:
    """Rolling-prediction training; saves the best-validation weights and the loss curves."""
    mc = cfg.model
    splits = load_dataset(data_dir)
    if not splits["train"]:
        raise CliError(f"dataset {data_dir} has no training episodes")
    epochs = mc.epochs if epochs is None else epochs
    resume = cfg.nominal_weights is not None
    model = build_model(cfg, reset_residual=True, untrained=not resume)
    if not resume:
        mean, scale = fit_normalizer_from(splits["train"], mc.n_f)
        model.nominal_net.mean, model.nominal_net.scale = mean, scale
    adam = AdamState(lr_initial=mc.lr_initial, lr_final=mc.lr_final, decay_epochs=max(epochs, 1))
    out = _out_dir(out)
    t0 = time.perf_counter()
    net, rep = fit_nominal(splits["train"], splits["val"], model, epochs, mc.N, mc.batch_size, adam,
                           seed=cfg.seed, stride=mc.window_stride,
                           log=lambda e, a, b: log.info("epoch %d train %.5f val %.5f", e, a, b))
    net.save(out / "nominal.txt")
    with open(out / "loss.csv", "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e, (a, b) in enumerate(zip(rep.train_loss, rep.val_loss)):
            fh.write(f"{e},{a:.9g},{b:.9g}\n")
    report = {"epochs": epochs, "best_epoch": rep.best_epoch,
              "best_val_loss": rep.best_val if np.isfinite(rep.best_val) else None,
              "train_windows_stride": mc.window_stride, "wall_time": round(time.perf_counter() - t0, 3)}
    _write_json(out / "report.json", report)
    return report


def cmd_eval_model(cfg: ScenarioConfig, out, reset_residual: bool = False) -> dict:
    """Rolling RMSE of the trailer yaw rate against prediction step for each model mode."""
    ec, mc = cfg.eval, cfg.model
    model = build_model(cfg, reset_residual)
    plant = trailer_preset(ec.kind, ec.payload, geom=model.geom)
    settings = loop_settings(cfg)
    res = evaluate_model(model, plant, mc.N, mc.n_e, mc.epsilon, settings.trainer, cfg.seed, warmup=ec.warmup,
                         modes=ec.modes, measurement=MeasurementNoise(ec.zeta_noise_std, ec.omega_noise_std))
    out = _out_dir(out)
    (out / "rmse.csv").write_text(res.table())
    summary = {"samples": res.meta["samples"], "s_e_fraction": float(res.s_e.mean()) if len(res.s_e) else 0.0,
               "rmse": {m: [float(x) for x in v] for m, v in res.rmse.items()}}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_track(cfg: ScenarioConfig, out, reset_residual: bool = False) -> dict:
    """Figure-eight trailer tracking without obstacles, per configured mode."""
    tc = cfg.track
    out = _out_dir(out)
    report = {}
    lines = ["mode,mean,std,max"]
    for mode in tc.modes:
        model = build_model(cfg, reset_residual)
        plant = cfg.plant.model_copy(update={"kind": tc.kind, "payload": tc.payload}).build(model.geom)
        planner = make_planner(cfg, use_residual=mode == "weighted", track_trailer=True)
        res = run_tracking(model, plant, planner, tc.amplitude, tc.period, tc.laps, loop_settings(cfg), cfg.seed, mode)
        _save_track(out / f"tracking_{mode}.csv", res)
        write_diagnostics(res.diagnostics, out / f"diagnostics_{mode}.jsonl")
        report[mode] = res.stats
        lines.append(f"{mode},{res.stats['mean']:.9g},{res.stats['std']:.9g},{res.stats['max']:.9g}")
        if mode == "weighted" and res.residual is not None:
            res.residual.save(out / "residual.txt")
    (out / "tracking_report.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "tracking_report.json", report)
    return report


def _save_track(path: Path, res) -> None:
    from .scenarios import STATE_COLUMNS
    rows = np.array(res.rows).reshape(-1, len(STATE_COLUMNS))
    data = np.column_stack((rows, res.errors[:len(rows)]))
    np.savetxt(path, data, fmt="%.9g", delimiter=",", header=",".join(STATE_COLUMNS + ("error",)), comments="")


def _scenario(cfg: ScenarioConfig, model: HybridModel) -> NavScenario:
    nc = cfg.navigate
    if nc.world is not None:
        if nc.start is None or nc.goal is None:
            raise CliError("a world file needs navigate.start and navigate.goal")
        return NavScenario(Path(nc.world).stem, World.load(nc.world), tuple(nc.start), tuple(nc.goal),
                           cfg.plant.build(model.geom), nc.timeout)
    scenarios = builtin_scenarios(model.geom)
    if nc.scenario not in scenarios:
        raise CliError(f"unknown scenario {nc.scenario!r}; choose from {sorted(scenarios)}")
    scn = scenarios[nc.scenario]
    start = tuple(nc.start) if nc.start is not None else scn.start
    goal = tuple(nc.goal) if nc.goal is not None else scn.goal
    return NavScenario(scn.name, scn.world, start, goal, scn.plant, nc.timeout)


def perception_config(cfg: ScenarioConfig) -> PerceptionConfig:
    pc = cfg.navigate.perception
    return PerceptionConfig(ScanSpec(pc.n_beams, pc.max_range), pc.eps, pc.min_pts, pc.min_radius, pc.max_radius)


def cmd_navigate(cfg: ScenarioConfig, out, reset_residual: bool = False) -> dict:
    """Closed-loop run in a builtin or file-based world; writes trajectory, diagnostics and events."""
    nc = cfg.navigate
    model = build_model(cfg, reset_residual)
    scn = _scenario(cfg, model)
    planner = make_planner(cfg, use_residual=True)
    res = run_navigation(scn, model, planner, perception_config(cfg), loop_settings(cfg), nc.goal_tol_xy,
                         nc.goal_tol_psi, nc.grid_resolution, nc.perception.obstacle_range, cfg.seed,
                         log=log.info)
    out = _out_dir(out)
    res.save(out)
    if res.residual is not None:
        res.residual.save(out / "residual.txt")
    return res.summary()


# -- argument parsing -----------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML scenario config")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--reset-residual", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="ignore saved residual weights and start from zero")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trailernav", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    verbs = {
        "collect": "simulate excitation episodes and write a dataset",
        "train-nominal": "train the nominal trailer yaw-rate net",
        "eval-model": "rolling RMSE of the three model modes",
        "track": "figure-eight trailer tracking benchmark",
        "navigate": "closed-loop navigation run",
        "schema": "print the config JSON schema",
    }
    for name, help_ in verbs.items():
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        if name == "train-nominal":
            sp.add_argument("--data", required=True, help="dataset directory written by collect")
            sp.add_argument("--epochs", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.verb == "schema":
        print(config_schema())
        return 0
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = args.out or f"runs/{args.verb}"
        if args.verb == "collect":
            files = cmd_collect(cfg, out)
            print(f"wrote {len(files)} episodes to {out}")
        elif args.verb == "train-nominal":
            rep = cmd_train_nominal(cfg, args.data, out, args.epochs)
            print(json.dumps(rep, sort_keys=True))
        elif args.verb == "eval-model":
            summary = cmd_eval_model(cfg, out, args.reset_residual)
            print((Path(out) / "rmse.csv").read_text(), end="")
            print(f"s_e active fraction {summary['s_e_fraction']:.3f}")
        elif args.verb == "track":
            rep = cmd_track(cfg, out, args.reset_residual)
            print((Path(out) / "tracking_report.csv").read_text(), end="")
        elif args.verb == "navigate":
            summary = cmd_navigate(cfg, out, args.reset_residual)
            print(json.dumps(summary, sort_keys=True))
            return 0 if summary["success"] else 1
    except (CliError, InvalidInputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
