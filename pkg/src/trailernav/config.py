"""Scenario configuration: YAML files validated by strict pydantic models.

Every section rejects unknown keys. ``ScenarioConfig()`` holds the defaults used
throughout the package.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import Bounds, SystemGeometry
from .mpc import MpcWeights, SolverOptions
from .plant import DisturbanceSpec, TerrainPulse, TrailerKind, trailer_preset


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    n_f: int = Field(3, ge=1)
    N: int = Field(30, ge=1)
    dt: float = Field(0.1, gt=0)
    n_c: int = Field(15, ge=1)
    n_e: int = Field(15, ge=1)
    n_t: int = Field(200, ge=2)
    epsilon: float = Field(0.5, gt=0)
    nominal_hidden: tuple[int, ...] = (64, 32, 16)
    residual_hidden: tuple[int, ...] = (32, 16)
    batch_size: int = Field(256, ge=1)
    lr_initial: float = Field(1e-2, gt=0)
    lr_final: float = Field(1e-5, gt=0)
    epochs: int = Field(30, ge=0)
    window_stride: int = Field(2, ge=1)
    residual_lr: float = Field(3e-3, gt=0)
    residual_budget: int = Field(20, ge=0)
    residual_horizon: int = Field(5, ge=1)
    residual_every: int = Field(1, ge=1)


class GeometrySection(_Strict):
    l: float = Field(0.55, gt=0)
    l_fh: float = Field(0.30, ge=0)
    l_hr: float = Field(0.70, ge=0)

    def build(self) -> SystemGeometry:
        return SystemGeometry(l=self.l, l_fh=self.l_fh, l_hr=self.l_hr)


class PulseSection(_Strict):
    start: float
    duration: float = Field(gt=0)
    amplitude: float


class PlantSection(_Strict):
    kind: TrailerKind = TrailerKind.ALL_CASTOR
    payload: float = Field(0.0, ge=0)
    yaw_time_constant: Optional[float] = Field(None, gt=0)
    slip_gain: Optional[float] = Field(None, ge=0, lt=1)
    drag_coefficient: Optional[float] = Field(None, ge=0)
    process_noise_std: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.002)
    terrain_pulses: tuple[PulseSection, ...] = ()
    constant_bias: float = 0.0

    def build(self, geom: SystemGeometry):
        over = {k: getattr(self, k) for k in ("yaw_time_constant", "slip_gain", "drag_coefficient")
                if getattr(self, k) is not None}
        dist = DisturbanceSpec(self.process_noise_std,
                               tuple(TerrainPulse(p.start, p.duration, p.amplitude) for p in self.terrain_pulses),
                               self.constant_bias)
        return trailer_preset(self.kind, self.payload, geom=geom, disturbance=dist, **over)


class BoundsSection(_Strict):
    v: tuple[float, float] = (0.0, 1.0)
    delta: tuple[float, float] = (-0.6, 0.6)
    theta: tuple[float, float] = (-1.2, 1.2)
    omega_psi: tuple[float, float] = (-1.2, 1.2)
    omega_zeta: tuple[float, float] = (-2.0, 2.0)

    def build(self) -> Bounds:
        return Bounds(state_lo=(-1e4, -1e4, -1e4, -1e4, self.omega_zeta[0]),
                      state_hi=(1e4, 1e4, 1e4, 1e4, self.omega_zeta[1]),
                      input_lo=(self.v[0], self.delta[0]), input_hi=(self.v[1], self.delta[1]),
                      theta_lo=self.theta[0], theta_hi=self.theta[1],
                      omega_psi_lo=self.omega_psi[0], omega_psi_hi=self.omega_psi[1])


class WeightsSection(_Strict):
    Q_t_diag: tuple[float, float, float, float, float] = (5.0, 5.0, 1.0, 0.5, 0.1)
    Q_ref: tuple[float, float] = (10.0, 10.0)
    Q_u_base: tuple[float, float] = (0.01, 0.1)
    Q_du_base: tuple[float, float] = (1.0, 2.0)
    kappa_u: float = 10.0
    lambda_f: float = 100.0
    lambda_r: float = 100.0
    gamma_f: float = 0.3
    gamma_r: float = 0.3
    d_safe: float = 0.1
    sigma_min: float = 1e-4
    sigma_max: float = 1.0

    def build(self, track_trailer: bool = False) -> MpcWeights:
        qt = tuple(tuple(self.Q_t_diag[i] if i == j else 0.0 for j in range(5)) for i in range(5))
        d = self.model_dump()
        d.pop("Q_t_diag")
        return MpcWeights(Q_t=qt, track_trailer=track_trailer, **d)


class SolverSection(_Strict):
    max_iter: int = Field(30, ge=1)
    rounds: int = Field(5, ge=1)
    mu0: float = Field(1e3, gt=0)
    mu_factor: float = Field(10.0, gt=1)
    tol_con: float = Field(1e-3, gt=0)
    armijo_c: float = Field(1e-4, gt=0, lt=1)
    backtrack: float = Field(0.5, gt=0, lt=1)
    tol_rel: float = Field(1e-4, gt=0)
    backoff: float = Field(0.1, ge=0)
    max_replays: int = Field(2, ge=0)

    def build(self) -> SolverOptions:
        return SolverOptions(**self.model_dump())


class CollectSection(_Strict):
    episodes: int = Field(40, ge=1)
    steps: int = 1500
    min_steps: int = Field(100, ge=2)
    kinds: tuple[TrailerKind, ...] = (TrailerKind.RIGID_REAR_CASTOR_FRONT, TrailerKind.ALL_CASTOR)
    payloads: tuple[float, ...] = (0.0, 5.0, 10.0)

    @model_validator(mode="after")
    def _enough_steps(self):
        if self.steps < self.min_steps:
            raise ValueError(f"steps={self.steps} is below the minimum {self.min_steps}")
        return self


class EvalSection(_Strict):
    kind: TrailerKind = TrailerKind.ALL_CASTOR
    payload: float = 30.0
    warmup: int = Field(60, ge=0)
    modes: tuple[Literal["nominal", "unweighted", "weighted"], ...] = ("nominal", "unweighted", "weighted")
    zeta_noise_std: float = Field(0.01, ge=0)
    omega_noise_std: float = Field(0.03, ge=0)


class TrackSection(_Strict):
    kind: TrailerKind = TrailerKind.ALL_CASTOR
    payload: float = 30.0
    amplitude: float = Field(6.0, ge=0)
    period: float = Field(70.0, gt=0)
    laps: float = Field(1.0, gt=0)
    modes: tuple[Literal["nominal", "weighted"], ...] = ("nominal", "weighted")


class PerceptionSection(_Strict):
    n_beams: int = Field(360, ge=1)
    max_range: float = Field(8.0, gt=0)
    eps: float = Field(0.4, gt=0)
    min_pts: int = Field(3, ge=1)
    min_radius: float = Field(0.1, gt=0)
    max_radius: Optional[float] = Field(0.35, gt=0)
    obstacle_range: float = Field(6.0, gt=0)


class NavigateSection(_Strict):
    scenario: Optional[str] = "castor"
    world: Optional[str] = None
    start: Optional[tuple[float, float, float]] = None
    goal: Optional[tuple[float, float, float]] = None
    timeout: float = Field(120.0, gt=0)
    v_ref: float = Field(0.5, gt=0)
    goal_tol_xy: float = Field(0.2, gt=0)
    goal_tol_psi: float = Field(0.2, gt=0)
    grid_resolution: float = Field(0.1, gt=0)
    perception: PerceptionSection = PerceptionSection()

    @field_validator("world")
    @classmethod
    def _world_exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"world file not found: {v}")
        return v


class ScenarioConfig(_Strict):
    seed: int = 0
    model: ModelSection = ModelSection()
    geometry: GeometrySection = GeometrySection()
    plant: PlantSection = PlantSection()
    bounds: BoundsSection = BoundsSection()
    weights: WeightsSection = WeightsSection()
    solver: SolverSection = SolverSection()
    collect: CollectSection = CollectSection()
    eval: EvalSection = EvalSection()
    track: TrackSection = TrackSection()
    navigate: NavigateSection = NavigateSection()
    nominal_weights: Optional[str] = None
    residual_weights: Optional[str] = None

    @field_validator("nominal_weights", "residual_weights")
    @classmethod
    def _file_exists(cls, v):
        if v is not None and not Path(v).is_file():
            raise ValueError(f"weights file not found: {v}")
        return v


def load_config(path=None, **overrides) -> ScenarioConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig.model_validate(data)


def config_schema() -> str:
    return json.dumps(ScenarioConfig.model_json_schema(), indent=2)
