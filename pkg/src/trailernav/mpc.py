"""Receding-horizon planner: single-shooting Gauss-Newton over the hybrid-model rollout,
squared-hinge penalties for obstacle and bound constraints, and the per-cycle pipeline."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (IOMEGA, IPSI, IZETA, Bounds, ControlInput, HistoryWindow, InvalidInputError, SystemGeometry,
                   SystemState, circle_centers_array, trailer_position_array, wrap_angle)
from .globalpath import ReferencePath, resample_reference
from .kinmodel import HybridModel, PerformanceMonitor, mode_weights, rollout_array, update_monitor
from .net import FusedPair
from .perception import ObstacleSet

COST_TERMS = ("terminal", "state", "input", "obstacle")


@dataclass(frozen=True)
class MpcWeights:
    Q_t: tuple = ((5.0, 0, 0, 0, 0), (0, 5.0, 0, 0, 0), (0, 0, 1.0, 0, 0), (0, 0, 0, 0.5, 0), (0, 0, 0, 0, 0.1))
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
    track_trailer: bool = False  # state cost on the trailer position instead of the vehicle

    def __post_init__(self):
        qt = np.asarray(self.Q_t, float)
        if qt.shape != (5, 5) or not np.allclose(qt, qt.T):
            raise InvalidInputError("Q_t must be a symmetric 5x5 matrix")
        try:
            np.linalg.cholesky(qt)
        except np.linalg.LinAlgError:
            raise InvalidInputError("Q_t must be positive definite") from None
        for name in ("Q_ref", "Q_u_base", "Q_du_base"):
            if len(getattr(self, name)) != 2 or min(getattr(self, name)) < 0:
                raise InvalidInputError(f"{name} must be two non-negative diagonal entries")
        if self.gamma_f <= 0 or self.gamma_r <= 0 or self.d_safe < 0 or self.kappa_u < 0:
            raise InvalidInputError("need gamma > 0, d_safe >= 0, kappa_u >= 0")
        if self.lambda_f < 0 or self.lambda_r < 0 or not 0 < self.sigma_min <= self.sigma_max:
            raise InvalidInputError("invalid obstacle gains or sigma clamp")

    def clamp_sigma(self, sigma_w: float) -> float:
        if not np.isfinite(sigma_w):
            return self.sigma_max
        return min(max(float(sigma_w), self.sigma_min), self.sigma_max)


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 30
    rounds: int = 5
    mu0: float = 1e3
    mu_factor: float = 10.0
    tol_con: float = 1e-3
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 12
    tol_rel: float = 1e-4
    damping: float = 1e-8
    backoff: float = 0.1  # obstacle hinge acts on d - backoff; violation is still measured on d
    max_replays: int = 2  # consecutive fail-safe replays of the old plan before braking


@dataclass(frozen=True)
class MpcProblem:
    history: HistoryWindow
    model: HybridModel  # s_e frozen in the snapshot
    sigma_w: float
    obstacles: ObstacleSet
    reference: np.ndarray  # (N + 1, 2)
    x_ter: np.ndarray  # (5,)
    bounds: Bounds = field(default_factory=Bounds)
    weights: MpcWeights = field(default_factory=MpcWeights)
    N: int = 30

    def __post_init__(self):
        ref = np.array(self.reference, float)
        if ref.shape != (self.N + 1, 2):
            raise InvalidInputError(f"reference must be ({self.N + 1}, 2), got {ref.shape}")
        xt = np.array(self.x_ter, float).reshape(5)
        if self.history.n_f != self.model.n_f:
            raise InvalidInputError("history length does not match the model's n_f")
        if not np.all(np.isfinite(self.history.states)):
            raise InvalidInputError("history contains non-finite states")
        ref.setflags(write=False)
        xt.setflags(write=False)
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "x_ter", xt)

    @property
    def dt(self) -> float:
        return self.model.dt


@dataclass
class MpcSolution:
    inputs: np.ndarray  # (N, 2): u_1 .. u_N
    states: np.ndarray  # (N, 5): x_1 .. x_N
    costs: dict
    max_violation: float
    iterations: int
    converged: bool
    solve_time: float
    merit_history: list = field(default_factory=list)  # (round, merit) after every accepted iterate
    min_dfr: float = math.inf

    @property
    def controls(self) -> list[ControlInput]:
        return [ControlInput(float(v), float(d)) for v, d in self.inputs]

    @property
    def state_list(self) -> list[SystemState]:
        return [SystemState.from_array(s) for s in self.states]

    def shifted(self) -> np.ndarray:
        return np.vstack((self.inputs[1:], self.inputs[-1:]))


# -- elementary terms ---------------------------------------------------------------------

def distance_circle(center, obs_center, r_body: float, r_obs: float, d_safe: float) -> float:
    return float(np.hypot(*(np.asarray(center, float) - np.asarray(obs_center, float)))) - r_body - r_obs - d_safe


def pair_distances(states: np.ndarray, geom: SystemGeometry, obstacles: ObstacleSet, d_safe: float):
    """Signed separations ``(..., n_fc, n_obs)`` and ``(..., n_rc, n_obs)``."""
    veh, trl = circle_centers_array(states, geom)
    c, r = obstacles.centers, obstacles.radii
    dv = np.linalg.norm(veh[..., :, None, :] - c, axis=-1) - geom.r_f - r - d_safe
    dt_ = np.linalg.norm(trl[..., :, None, :] - c, axis=-1) - geom.r_r - r - d_safe
    return dv, dt_


def min_separation(state, geom: SystemGeometry, obstacles: ObstacleSet, d_safe: float = 0.0) -> float:
    if len(obstacles) == 0:
        return math.inf
    s = state.as_array() if isinstance(state, SystemState) else np.asarray(state, float)
    dv, dt_ = pair_distances(s, geom, obstacles, d_safe)
    return float(min(dv.min(), dt_.min()))


def _state_error(x, x_ter) -> np.ndarray:
    e = np.asarray(x, float) - np.asarray(x_ter, float)
    e[IPSI] = wrap_angle(e[IPSI])
    e[IZETA] = wrap_angle(e[IZETA])
    return e


def cost_terminal(x_N, x_ter, Q_t) -> float:
    e = _state_error(x_N.as_array() if isinstance(x_N, SystemState) else x_N, x_ter)
    return float(e @ np.asarray(Q_t, float) @ e)


def cost_state(pos, ref, Q_ref) -> float:
    e = np.asarray(pos, float) - np.asarray(ref, float)
    q = np.asarray(Q_ref, float)
    return float(e @ q @ e) if q.ndim == 2 else float((q * e * e).sum())


def input_scale(sigma_w: float, weights: MpcWeights) -> float:
    if sigma_w < 0:
        raise InvalidInputError("sigma_w must be non-negative")
    return 1.0 + weights.kappa_u * sigma_w


def cost_input(u_k, u_next, sigma_w: float, weights: MpcWeights) -> float:
    a = np.asarray(u_k.as_array() if isinstance(u_k, ControlInput) else u_k, float)
    b = np.asarray(u_next.as_array() if isinstance(u_next, ControlInput) else u_next, float)
    sc = input_scale(sigma_w, weights)
    return float(sc * (np.asarray(weights.Q_u_base) * a * a).sum() + sc * (np.asarray(weights.Q_du_base) * (b - a) ** 2).sum())


def cost_obstacle(state, obstacles: ObstacleSet, sigma_w: float, weights: MpcWeights, geom: SystemGeometry) -> float:
    if len(obstacles) == 0:
        return 0.0
    s = state.as_array() if isinstance(state, SystemState) else np.asarray(state, float)
    dv, dt_ = pair_distances(s, geom, obstacles, weights.d_safe)
    return float(weights.lambda_f * sigma_w * np.exp(-dv / weights.gamma_f).sum()
                 + weights.lambda_r * sigma_w * np.exp(-dt_ / weights.gamma_r).sum())


# -- rollout with forward sensitivities --------------------------------------------------------

class _Compiled:
    """Per-problem constants for the hot path."""

    def __init__(self, problem: MpcProblem):
        model, w, geom = problem.model, problem.weights, problem.model.geom
        self.lams = mode_weights("weighted", model, problem.N)
        self.net = FusedPair(model.nominal_net, model.residual_net if model.s_e else None)
        self.heads, self.offs = self.net.head(self.lams)
        self.Lt = np.linalg.cholesky(np.asarray(w.Q_t, float))
        self.sq = np.sqrt(np.asarray(w.Q_ref, float))
        nfc, nrc = geom.n_fc, geom.n_rc
        self.rbody = np.array([geom.r_f] * nfc + [geom.r_r] * nrc)
        self.lam = np.array([w.lambda_f] * nfc + [w.lambda_r] * nrc)
        self.gam = np.array([w.gamma_f] * nfc + [w.gamma_r] * nrc)
        self.sigma = w.clamp_sigma(problem.sigma_w)
        sc = input_scale(self.sigma, w)
        self.qu = np.asarray(w.Q_u_base) * sc
        self.qdu = np.asarray(w.Q_du_base) * sc
        self.state_lo = np.asarray(problem.bounds.state_lo, float)
        self.state_hi = np.asarray(problem.bounds.state_hi, float)


def _compiled(problem: MpcProblem) -> _Compiled:
    cp = problem.__dict__.get("_compiled")
    if cp is None:
        cp = _Compiled(problem)
        object.__setattr__(problem, "_compiled", cp)
    return cp


def _rollout(problem: MpcProblem, U: np.ndarray, want_sens: bool = False):
    """Batched rollout: ``U (B, N, 2)`` to states ``(B, N, 5)``.

    Heading and position follow in closed form from the inputs; only the learned
    yaw rate and the trailer heading are stepped sequentially. With ``want_sens``
    (``B == 1``) also returns ``dX (N, 5, 2N)``.
    """
    cp = _compiled(problem)
    model, hist, N = problem.model, problem.history, problem.N
    n_f, dt, l = model.n_f, model.dt, model.geom.l
    m = n_f + 1
    B, T = len(U), m + N
    Ua = np.empty((B, T, 2))
    Ua[:, :m] = hist.inputs
    Ua[:, m:] = U
    hs = hist.states
    v, tan_d = Ua[:, n_f:T - 1, 0], np.tan(Ua[:, n_f:T - 1, 1])
    psi = np.empty((B, T))
    psi[:, :m] = hs[:, IPSI]
    psi[:, m:] = hs[-1, IPSI] + np.cumsum(v * tan_d * (dt / l), axis=1)
    ps = psi[:, n_f:T - 1]
    cps, sps = np.cos(ps), np.sin(ps)
    xs = hs[-1, 0] + np.cumsum(v * cps * dt, axis=1)
    ys = hs[-1, 1] + np.cumsum(v * sps * dt, axis=1)
    zeta = np.empty((B, T))
    om = np.empty((B, T))
    zeta[:, :m] = hs[:, IZETA]
    om[:, :m] = hs[:, IOMEGA]
    feats = np.empty((B, N, 4 * m))
    win = np.lib.stride_tricks.sliding_window_view(Ua, m, axis=1)  # (B, N + 1, 2, m)
    feats[:, :, 2 * m:] = win[:, :N].transpose(0, 1, 3, 2).reshape(B, N, 2 * m)
    net, heads, offs = cp.net, cp.heads, cp.offs
    for k in range(N):
        i = n_f + k
        f = feats[:, k]
        np.subtract(psi[:, k:i + 1], zeta[:, k:i + 1], out=f[:, :m])
        f[:, m:2 * m] = om[:, k:i + 1]
        om[:, i + 1] = net.value(f, heads[k], offs[k])
        zeta[:, i + 1] = zeta[:, i] + om[:, i] * dt
    X = np.stack((xs, ys, psi[:, m:], zeta[:, m:], om[:, m:]), axis=-1)
    if not want_sens:
        return X
    # sensitivities with respect to the flattened decisions u_1..u_N
    nd = 2 * N
    F = feats[0]
    jac = net.grad_batch(F, heads)
    steps = np.arange(1, N)
    drate = np.zeros((N, nd))  # d(heading increment of step k) / du
    drate[steps, 2 * (steps - 1)] = tan_d[0, 1:] * dt / l
    drate[steps, 2 * (steps - 1) + 1] = v[0, 1:] * dt / (l * np.cos(Ua[0, m:T - 1, 1]) ** 2)
    dpsi = np.cumsum(drate, axis=0)  # states x_1..x_N
    P = np.vstack((np.zeros((1, nd)), dpsi[:-1]))  # heading at the step's start state
    inc_x = (-v[0] * sps[0] * dt)[:, None] * P
    inc_y = (v[0] * cps[0] * dt)[:, None] * P
    inc_x[steps, 2 * (steps - 1)] += cps[0, 1:] * dt
    inc_y[steps, 2 * (steps - 1)] += sps[0, 1:] * dt
    dx = np.cumsum(inc_x, axis=0)
    dy = np.cumsum(inc_y, axis=0)
    dps_full = np.zeros((T, nd))
    dps_full[m:] = dpsi
    dze = np.zeros((T, nd))
    dom = np.zeros((T, nd))
    for k in range(N):
        i = n_f + k
        dze[i + 1] = dze[i] + dt * dom[i]
        r = jac[k, :m] @ (dps_full[k:i + 1] - dze[k:i + 1]) + jac[k, m:2 * m] @ dom[k:i + 1]
        if k >= 1:
            p0 = max(0, m - k)  # first window slot holding a decision
            j0 = k - n_f + p0
            r[2 * (j0 - 1):2 * k] += jac[k, 2 * m + 2 * p0:]
        dom[i + 1] = r
    dX = np.stack((dx, dy, dpsi, dze[m:], dom[m:]), axis=1)
    return X, dX


def rollout_states(problem: MpcProblem, U: np.ndarray, want_sens: bool = False):
    """Weighted-model states x_1..x_N for decisions ``U = [u_1..u_N]``.

    With ``want_sens`` also returns ``dX`` of shape ``(N, 5, 2N)``.
    """
    U = np.asarray(U, float).reshape(1, problem.N, 2)
    if want_sens:
        X, dX = _rollout(problem, U, True)
        return X[0], dX
    return _rollout(problem, U)[0]


# -- residual model of the objective ------------------------------------------------------------

def _position_and_jac(X: np.ndarray, geom: SystemGeometry, trailer: bool):
    n = len(X)
    J = np.zeros((n, 2, 5))
    J[:, 0, 0] = J[:, 1, 1] = 1.0
    if not trailer:
        return X[:, :2], J
    psi, zeta = X[:, IPSI], X[:, IZETA]
    J[:, 0, IPSI] = geom.l_fh * np.sin(psi)
    J[:, 1, IPSI] = -geom.l_fh * np.cos(psi)
    J[:, 0, IZETA] = geom.l_hr * np.sin(zeta)
    J[:, 1, IZETA] = -geom.l_hr * np.cos(zeta)
    return trailer_position_array(X, geom), J


def _circle_jacobians(X: np.ndarray, geom: SystemGeometry):
    """State Jacobians ``(N, C, 2, 5)`` of all covering-circle centers."""
    n, nfc, nrc = len(X), geom.n_fc, geom.n_rc
    J = np.zeros((n, nfc + nrc, 2, 5))
    J[:, :, 0, 0] = J[:, :, 1, 1] = 1.0
    sp, cp = np.sin(X[:, IPSI]), np.cos(X[:, IPSI])
    sz, cz = np.sin(X[:, IZETA]), np.cos(X[:, IZETA])
    for c, o in enumerate(geom.vehicle_circle_offsets):
        J[:, c, 0, IPSI] = -o * sp
        J[:, c, 1, IPSI] = o * cp
    for c, o in enumerate(geom.trailer_circle_offsets):
        J[:, nfc + c, 0, IPSI] = geom.l_fh * sp
        J[:, nfc + c, 1, IPSI] = -geom.l_fh * cp
        J[:, nfc + c, 0, IZETA] = (geom.l_hr - o) * sz
        J[:, nfc + c, 1, IZETA] = -(geom.l_hr - o) * cz
    return J


@dataclass
class _Merit:
    """Batched merit terms; every field has a leading batch axis."""
    merit: np.ndarray
    costs: dict
    violation: np.ndarray
    min_dfr: np.ndarray
    terminal_res: np.ndarray
    state_res: np.ndarray
    obs: tuple | None  # (diff, dist, d, ro, hinge)
    box: list  # (sign, hinge) on the state rows
    theta: list
    wpsi: list


def _merit(problem: MpcProblem, X: np.ndarray, U: np.ndarray, mu: float, backoff: float = 0.0) -> _Merit:
    """Cost plus squared-hinge penalty for ``X (B, N, 5)`` and ``U (B, N, 2)``."""
    cp = _compiled(problem)
    N, geom, w, b = problem.N, problem.model.geom, problem.weights, problem.bounds
    B = len(X)
    costs = {}
    pen = np.zeros(B)
    viol = np.zeros(B)
    # terminal
    e = X[:, -1] - problem.x_ter
    e[:, IPSI] = wrap_angle(e[:, IPSI])
    e[:, IZETA] = wrap_angle(e[:, IZETA])
    rt = e @ cp.Lt
    costs["terminal"] = (rt * rt).sum(axis=1)
    # reference tracking, k = 1..N-1
    pos = trailer_position_array(X[:, :-1], geom) if w.track_trailer else X[:, :-1, :2]
    rs = (pos - problem.reference[1:N]) * cp.sq
    costs["state"] = (rs * rs).sum(axis=(1, 2))
    # obstacles: exponential cost for k = 1..N-1, separation constraint for k = 2..N;
    # min_dfr still reports every predicted state
    min_dfr = np.full(B, math.inf)
    obs = None
    costs["obstacle"] = np.zeros(B)
    if len(problem.obstacles):
        veh, trl = circle_centers_array(X, geom)
        centers = np.concatenate((veh, trl), axis=2)  # (B, N, C, 2)
        diff = centers[:, :, :, None, :] - problem.obstacles.centers  # (B, N, C, O, 2)
        dist = np.sqrt((diff * diff).sum(axis=-1))
        d = dist - cp.rbody[:, None] - problem.obstacles.radii - w.d_safe
        ro = np.sqrt(cp.lam * cp.sigma)[:, None] * np.exp(-d / (2 * cp.gam[:, None]))
        ro[:, -1] = 0.0
        costs["obstacle"] = (ro * ro).sum(axis=(1, 2, 3))
        min_dfr = d.min(axis=(1, 2, 3))
        viol = np.maximum(viol, np.maximum(-d[:, 1:], 0.0).max(axis=(1, 2, 3), initial=0.0))
        hinge = np.maximum(backoff - d, 0.0)
        hinge[:, 0] = 0.0
        pen += mu * (hinge * hinge).sum(axis=(1, 2, 3))
        obs = (diff, dist, d, ro, hinge)
    # state bounds and hitch-angle limits, k = 2..N (x_1 is fixed by the committed input)
    box, th = [], []
    for sgn, lim in ((1.0, cp.state_hi), (-1.0, cp.state_lo)):
        h = np.maximum(sgn * (X - lim), 0.0)
        h[:, 0] = 0.0
        box.append((sgn, h))
        viol = np.maximum(viol, h.max(axis=(1, 2)))
        pen += mu * (h * h).sum(axis=(1, 2))
    theta = X[:, :, IPSI] - X[:, :, IZETA]
    for sgn, lim in ((1.0, b.theta_hi), (-1.0, b.theta_lo)):
        h = np.maximum(sgn * (theta - lim), 0.0)
        h[:, 0] = 0.0
        th.append((sgn, h))
        viol = np.maximum(viol, h.max(axis=1))
        pen += mu * (h * h).sum(axis=1)
    # input terms: magnitude for u_1..u_{N-1}, rate u_{k+1} - u_k
    du = np.diff(U, axis=1)
    costs["input"] = (cp.qu * U[:, :-1] ** 2).sum(axis=(1, 2)) + (cp.qdu * du * du).sum(axis=(1, 2))
    # yaw-rate limits on u_1..u_N
    wpsi = U[:, :, 0] * np.tan(U[:, :, 1]) / geom.l
    wl = []
    for sgn, lim in ((1.0, b.omega_psi_hi), (-1.0, b.omega_psi_lo)):
        h = np.maximum(sgn * (wpsi - lim), 0.0)
        wl.append((sgn, h))
        viol = np.maximum(viol, h.max(axis=1))
        pen += mu * (h * h).sum(axis=1)
    costs = {k: costs[k] for k in COST_TERMS}
    merit = sum(costs.values()) + pen
    return _Merit(merit, costs, viol, min_dfr, rt, rs, obs, box, th, wl)


@dataclass
class _Eval:
    merit: float
    costs: dict
    violation: float
    min_dfr: float
    X: np.ndarray
    grad: np.ndarray | None = None
    H: np.ndarray | None = None


def _evaluate(problem: MpcProblem, U: np.ndarray, mu: float, want_derivs: bool, backoff: float = 0.0) -> _Eval:
    """Merit ``||r||^2`` (cost plus squared-hinge penalty) with its Gauss-Newton model."""
    N, geom, w = problem.N, problem.model.geom, problem.weights
    cp = _compiled(problem)
    U = np.asarray(U, float).reshape(N, 2)
    if want_derivs:
        Xb, dX = _rollout(problem, U[None], True)
    else:
        Xb = _rollout(problem, U[None])
    mt = _merit(problem, Xb, U[None], mu, backoff)
    X = Xb[0]
    ev = _Eval(float(mt.merit[0]), {k: float(v[0]) for k, v in mt.costs.items()}, float(mt.violation[0]),
               float(mt.min_dfr[0]), X)
    if not want_derivs:
        return ev
    # Gauss-Newton blocks per predicted state: M_k = sum G^T G, m_k = sum G^T r
    M = np.zeros((N, 5, 5))
    m = np.zeros((N, 5))
    M[-1] += cp.Lt @ cp.Lt.T
    m[-1] += cp.Lt @ mt.terminal_res[0]
    _, Jp = _position_and_jac(X[:-1], geom, w.track_trailer)
    Gs = Jp * cp.sq[None, :, None]
    M[:-1] += Gs.transpose(0, 2, 1) @ Gs
    m[:-1] += (Gs * mt.state_res[0][..., None]).sum(axis=1)
    if mt.obs is not None:
        diff, dist, d, ro, hinge = (a[0] for a in mt.obs)
        nrm = diff / np.maximum(dist, 1e-12)[..., None]
        gd = nrm @ _circle_jacobians(X, geom)  # (N, C, O, 5)
        Go = ((-ro / (2 * cp.gam[None, :, None]))[..., None] * gd).reshape(N, -1, 5)
        M += Go.transpose(0, 2, 1) @ Go
        m += (Go * ro.reshape(N, -1, 1)).sum(axis=1)
        if hinge.any():
            Gh = (-math.sqrt(mu) * gd * (hinge > 0)[..., None]).reshape(N, -1, 5)
            M += Gh.transpose(0, 2, 1) @ Gh
            m += (Gh * (math.sqrt(mu) * hinge).reshape(N, -1, 1)).sum(axis=1)
    diag = np.arange(5)
    for sgn, h in mt.box:
        h = h[0]
        if h.any():
            M[:, diag, diag] += mu * (h > 0)
            m += mu * h * sgn
    gth = np.zeros(5)
    gth[IPSI], gth[IZETA] = 1.0, -1.0
    for sgn, h in mt.theta:
        h = h[0]
        if h.any():
            M += mu * (h > 0)[:, None, None] * np.outer(gth, gth)
            m += mu * (h * sgn)[:, None] * gth

    nd = 2 * N
    dXf = dX.reshape(-1, nd)
    grad = dXf.T @ m.ravel()
    H = dXf.T @ (M @ dX).reshape(-1, nd)
    # input magnitude and rate (exact quadratic)
    qu, qdu = cp.qu, cp.qdu
    du = np.diff(U, axis=0)
    mag = np.zeros(nd)
    mag[:2 * (N - 1)] = np.tile(qu, N - 1)
    grad += mag * U.ravel()
    H[np.diag_indices(nd)] += mag
    for c in range(2):
        q = qdu[c]
        idx = np.arange(N - 1) * 2 + c
        grad[idx] -= q * du[:, c]
        grad[idx + 2] += q * du[:, c]
        H[idx, idx] += q
        H[idx + 2, idx + 2] += q
        H[idx, idx + 2] -= q
        H[idx + 2, idx] -= q
    # yaw-rate hinge
    v, dl = U[:, 0], U[:, 1]
    a = np.arange(N) * 2
    for sgn, h in mt.wpsi:
        h = h[0]
        if h.any():
            jv = sgn * np.tan(dl) / geom.l
            jd = sgn * v / (geom.l * np.cos(dl) ** 2)
            act = (h > 0).astype(float)
            grad[a] += mu * h * jv
            grad[a + 1] += mu * h * jd
            H[a, a] += mu * act * jv * jv
            H[a + 1, a + 1] += mu * act * jd * jd
            H[a, a + 1] += mu * act * jv * jd
            H[a + 1, a] += mu * act * jv * jd
    ev.grad = 2.0 * grad
    ev.H = 2.0 * H
    return ev


def objective_gradient(problem: MpcProblem, U, mu: float = 0.0, backoff: float = 0.0) -> tuple[float, np.ndarray]:
    """Merit value and exact gradient with respect to the flattened decisions."""
    ev = _evaluate(problem, U, mu, True, backoff)
    return ev.merit, ev.grad


def objective(problem: MpcProblem, U, mu: float = 0.0, backoff: float = 0.0) -> float:
    return _evaluate(problem, U, mu, False, backoff).merit


# -- solver -------------------------------------------------------------------------------------

def _project(U: np.ndarray, bounds: Bounds) -> np.ndarray:
    return np.clip(U, bounds.input_lo, bounds.input_hi)


def _line_search(problem, u, p, g, merit0, mu, lo, hi, options, batch: int = 4):
    """Armijo backtracking; trial step lengths are rolled out ``batch`` at a time.

    Returns the first acceptable point in backtracking order, or ``None``.
    """
    N = problem.N
    alphas = options.backtrack ** np.arange(options.max_backtracks)
    for j in range(0, len(alphas), batch):
        cand = np.clip(u + alphas[j:j + batch, None] * p, lo, hi)
        steps = cand - u
        moving = steps.any(axis=1)
        n_live = len(moving) if moving.all() else int(np.argmin(moving))
        if n_live == 0:
            return None
        cand, steps = cand[:n_live], steps[:n_live]
        Ub = cand.reshape(n_live, N, 2)
        merits = _merit(problem, _rollout(problem, Ub), Ub, mu, options.backoff).merit
        ok = merits <= merit0 + options.armijo_c * (steps @ g)
        if ok.any():
            return cand[int(np.argmax(ok))]
        if n_live < len(moving):
            return None
    return None


def solve(problem: MpcProblem, warm_start: MpcSolution | np.ndarray | None = None,
          options: SolverOptions = SolverOptions()) -> MpcSolution:
    """Projected Gauss-Newton with Armijo backtracking and escalating penalty weight.

    Inputs are kept inside their box by projection; every other constraint is a
    squared hinge whose weight grows by ``mu_factor`` per round until the
    worst violation drops below ``tol_con``.
    """
    t0 = time.perf_counter()
    N, b = problem.N, problem.bounds
    if warm_start is None:
        U = np.tile(problem.history.inputs[-1], (N, 1))
    elif isinstance(warm_start, MpcSolution):
        U = warm_start.shifted()
    else:
        U = np.array(warm_start, float).reshape(N, 2)
    if U.shape != (N, 2):
        raise InvalidInputError(f"warm start must have shape ({N}, 2)")
    U = _project(U, b)
    lo = np.tile(b.input_lo, N)
    hi = np.tile(b.input_hi, N)
    mu = options.mu0
    history = []
    iters = 0
    ev = _evaluate(problem, U, mu, True, options.backoff)
    for rnd in range(options.rounds):
        if rnd:
            ev = _evaluate(problem, U, mu, True, options.backoff)
        history.append((rnd, ev.merit))
        for _ in range(options.max_iter):
            iters += 1
            u = U.ravel()
            g = ev.grad
            active = ((u <= lo + 1e-12) & (g > 0)) | ((u >= hi - 1e-12) & (g < 0))
            free = ~active
            p = np.zeros(2 * N)
            if free.any():
                Hf = ev.H[np.ix_(free, free)]
                Hf = Hf + (options.damping * max(1.0, float(np.abs(np.diag(Hf)).max()))) * np.eye(int(free.sum()))
                try:
                    p[free] = -np.linalg.solve(Hf, g[free])
                except np.linalg.LinAlgError:
                    p[free] = -g[free]
            if g @ p >= 0:
                p = -g * free
            cand = _line_search(problem, u, p, g, ev.merit, mu, lo, hi, options)
            if cand is None:
                break
            prev = ev.merit
            U = cand.reshape(N, 2)
            ev = _evaluate(problem, U, mu, True, options.backoff)
            history.append((rnd, ev.merit))
            if prev - ev.merit <= options.tol_rel * max(prev, 1e-12):
                break
        if ev.violation <= options.tol_con:
            break
        mu *= options.mu_factor
    # states re-simulated through the reference step so they match weighted_step exactly
    X = rollout_array(problem.history.states, problem.history.inputs, U, problem.model,
                      mode_weights("weighted", problem.model, N))
    return MpcSolution(U.copy(), X, dict(ev.costs), ev.violation, iters, ev.violation <= options.tol_con,
                       time.perf_counter() - t0, history, ev.min_dfr)


# -- per-cycle pipeline ----------------------------------------------------------------------------

@dataclass
class Planner:
    """Receding-horizon loop state: warm start, path progress and the diagnostics stream."""

    weights: MpcWeights = field(default_factory=MpcWeights)
    bounds: Bounds = field(default_factory=Bounds)
    options: SolverOptions = field(default_factory=SolverOptions)
    N: int = 30
    v_ref: float = 0.5
    use_residual: bool = True
    prev: MpcSolution | None = None
    s_progress: float = 0.0
    replays: int = 0
    records: list = field(default_factory=list)

    def plan(self, history: HistoryWindow, obstacles: ObstacleSet, monitor: PerformanceMonitor,
             model: HybridModel, reference: np.ndarray, x_ter, t: float = 0.0):
        """Freeze (s_e, sigma_w) from the monitor, solve, and emit the first planned input."""
        sigma_f, sigma_fe, sigma_w, s_e = update_monitor(monitor, model)
        if not self.use_residual:
            s_e, sigma_w = 0, sigma_f
        snap = model.with_switch(s_e)
        problem = MpcProblem(history, snap, self.weights.clamp_sigma(sigma_w), obstacles, reference, x_ter,
                             self.bounds, self.weights, self.N)
        sol = solve(problem, self.prev, self.options)
        fallback = not sol.converged and self.prev is not None
        u = self.prev.inputs[1] if fallback else sol.inputs[0]
        if fallback:
            self.replays += 1
            if self.replays > self.options.max_replays:
                # the old plan has drifted too far from the plant to replay open-loop; stop and hold steering
                u = np.array([0.0, u[1]])
        else:
            self.replays = 0
        u = self.bounds.clip_input(u)
        if fallback:
            # keep the still-valid tail of the previous plan as the next warm start
            self.prev = MpcSolution(self.prev.shifted(), self.prev.states, self.prev.costs, self.prev.max_violation,
                                    0, False, 0.0)
        else:
            self.prev = sol
        rec = {"t": round(float(t), 10), "s_e": int(s_e), "sigma_f": _num(sigma_f), "sigma_fe": _num(sigma_fe),
               "sigma_w": _num(sigma_w), **{f"cost_{k}": v for k, v in sol.costs.items()},
               "min_dfr": _num(sol.min_dfr), "max_violation": sol.max_violation, "solve_time": sol.solve_time,
               "iterations": sol.iterations, "converged": bool(sol.converged), "fallback": bool(fallback),
               "v": float(u[0]), "delta": float(u[1])}
        self.records.append(rec)
        return ControlInput(float(u[0]), float(u[1])), sol, rec

    def plan_cycle(self, history: HistoryWindow, obstacles: ObstacleSet, monitor: PerformanceMonitor,
                   model: HybridModel, path: ReferencePath, t: float = 0.0):
        """Full pipeline against a global path; the terminal target is the path pose at the horizon end."""
        dt = model.dt
        lookahead = self.v_ref * dt * self.N
        ref, s0 = resample_reference(path, history.states[-1, :2], self.v_ref, dt, self.N,
                                     self.s_progress - 0.5, self.s_progress + lookahead)
        self.s_progress = max(self.s_progress, s0)
        end = path.interpolate(s0 + lookahead)
        psi_end = float(history.states[-1, IPSI] + wrap_angle(end[2] - history.states[-1, IPSI]))
        x_ter = np.array([ref[-1, 0], ref[-1, 1], psi_end, psi_end, 0.0])
        return self.plan(history, obstacles, monitor, model, ref, x_ter, t)


def plan_cycle(planner: Planner, history: HistoryWindow, obstacles: ObstacleSet, monitor: PerformanceMonitor,
               model: HybridModel, path: ReferencePath, t: float = 0.0):
    return planner.plan_cycle(history, obstacles, monitor, model, path, t)


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def write_diagnostics(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
