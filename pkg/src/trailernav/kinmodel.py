"""Hybrid vehicle-trailer kinematics: nominal step, learned residual, weighted combination,
rolling-prediction training, online residual adaptation and the switching monitor."""
from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (IOMEGA, IPSI, IZETA, InvalidInputError, HistoryWindow, SystemGeometry,
                   SystemState, ControlInput)
from .net import AdamState, MlpNetwork, adam_step

MODES = ("nominal", "unweighted", "weighted")


def feature_size(n_f: int) -> int:
    return 4 * (n_f + 1)


def features_from_arrays(states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """``[theta_hist, omega_hist, (v, delta)_hist]`` flattened, oldest first."""
    return np.concatenate((states[:, IPSI] - states[:, IZETA], states[:, IOMEGA], inputs.ravel()))


def feature_vector(window: HistoryWindow) -> np.ndarray:
    return features_from_arrays(window.states, window.inputs)


@dataclass(frozen=True)
class HybridModel:
    nominal_net: MlpNetwork
    residual_net: MlpNetwork
    geom: SystemGeometry = field(default_factory=SystemGeometry)
    dt: float = 0.1
    n_f: int = 3
    n_c: int = 15
    s_e: int = 0

    def __post_init__(self):
        if self.n_c < 1 or self.s_e not in (0, 1):
            raise InvalidInputError("need n_c >= 1 and s_e in {0, 1}")
        n_in = feature_size(self.n_f)
        if self.nominal_net.n_inputs != n_in or self.residual_net.n_inputs != n_in:
            raise InvalidInputError(f"both nets must take {n_in} features")

    def with_switch(self, s_e: int) -> "HybridModel":
        return self if s_e == self.s_e else replace(self, s_e=int(s_e))

    def with_residual(self, net: MlpNetwork) -> "HybridModel":
        return replace(self, residual_net=net)


def default_nets(n_f: int = 3, nominal_hidden=(64, 32, 16), residual_hidden=(32, 16),
                 seed: int = 0) -> tuple[MlpNetwork, MlpNetwork]:
    rng = np.random.default_rng(seed)
    n_in = feature_size(n_f)
    nominal = MlpNetwork.initialize([n_in, *nominal_hidden, 1], rng)
    residual = MlpNetwork.initialize([n_in, *residual_hidden, 1], rng, zero_output=True)
    return nominal, residual


def lambda_e(k: int, model: HybridModel) -> float:
    if k < 0:
        raise InvalidInputError("step index must be non-negative")
    return model.s_e * max(1.0 - k / model.n_c, 0.0)


def step_array(states: np.ndarray, inputs: np.ndarray, model: HybridModel, lam: float,
               with_jacobian: bool = False):
    """One hybrid-model step on raw window arrays.

    Returns the next state; with ``with_jacobian`` also the gradient of the
    predicted yaw rate with respect to the feature vector.
    """
    x = states[-1]
    v, delta = inputs[-1]
    feat = features_from_arrays(states, inputs)
    if with_jacobian:
        om, jac = model.nominal_net.forward_and_jacobian(feat)
        if lam != 0.0:
            ye, je = model.residual_net.forward_and_jacobian(feat)
            om = om + lam * ye
            jac = jac + lam * je
    else:
        om = model.nominal_net.forward(feat)
        if lam != 0.0:
            om = om + lam * model.residual_net.forward(feat)
    dt = model.dt
    psi = x[IPSI]
    nxt = np.array([x[0] + v * math.cos(psi) * dt,
                    x[1] + v * math.sin(psi) * dt,
                    psi + v * math.tan(delta) * dt / model.geom.l,
                    x[IZETA] + x[IOMEGA] * dt,
                    om])
    return (nxt, jac) if with_jacobian else nxt


def nominal_step(window: HistoryWindow, model: HybridModel) -> SystemState:
    return SystemState.from_array(step_array(window.states, window.inputs, model, 0.0))


def residual_delta(window: HistoryWindow, model: HybridModel) -> float:
    return model.residual_net.forward(feature_vector(window))


def weighted_step(window: HistoryWindow, model: HybridModel, k: int) -> SystemState:
    return SystemState.from_array(step_array(window.states, window.inputs, model, lambda_e(k, model)))


def mode_weights(mode: str, model: HybridModel, n: int) -> np.ndarray:
    if mode == "nominal":
        return np.zeros(n)
    if mode == "unweighted":
        return np.ones(n)
    if mode == "weighted":
        return np.array([lambda_e(k, model) for k in range(n)])
    raise InvalidInputError(f"unknown mode {mode!r}")


def rollout_array(states: np.ndarray, inputs: np.ndarray, controls: np.ndarray, model: HybridModel,
                  lams: np.ndarray) -> np.ndarray:
    """Roll ``len(controls)`` steps from a history window.

    ``controls[k]`` is the input applied at predicted step ``k + 1``; the window's
    own last input drives step 0.
    """
    S = np.array(states, float)
    U = np.array(inputs, float)
    out = []
    for k in range(len(controls)):
        nxt = step_array(S, U, model, float(lams[k]))
        out.append(nxt)
        S = np.vstack((S[1:], nxt))
        U = np.vstack((U[1:], controls[k]))
    return np.array(out).reshape(-1, 5)


def rollout(window: HistoryWindow, controls, model: HybridModel, mode: str = "weighted") -> list[SystemState]:
    """N-step prediction feeding each prediction back into the sliding window.

    ``controls`` holds the inputs applied at predicted states 1..N (the last
    one only matters for callers that keep stepping).
    """
    c = np.array([u.as_array() if isinstance(u, ControlInput) else u for u in controls], float).reshape(-1, 2)
    lams = mode_weights(mode, model, len(c))
    return [SystemState.from_array(s) for s in rollout_array(window.states, window.inputs, c, model, lams)]


# -- batched rolling prediction (training, monitor, evaluation) ---------------------------

def rolling_predict(seed_states: np.ndarray, inputs: np.ndarray, horizon: int, model: HybridModel,
                    lams, trainable: str | None = None, targets: np.ndarray | None = None):
    """Batched multi-step prediction of the trailer yaw rate.

    ``seed_states``: ``(B, n_f + 1, 5)`` measured history; ``inputs``:
    ``(B, n_f + horizon, 2)`` inputs from the oldest seed frame onward.
    Returns predicted yaw rates ``(B, horizon)``. When ``targets`` are given,
    also returns the rolling loss (per-step batch MSE summed over the horizon)
    and, if ``trainable`` names a net, that net's parameter gradients.
    """
    n_f = model.n_f
    B = seed_states.shape[0]
    if seed_states.shape[1:] != (n_f + 1, 5) or inputs.shape[:2] != (B, n_f + horizon) or inputs.shape[2] != 2:
        raise InvalidInputError(f"bad sample shapes {seed_states.shape} / {inputs.shape} for horizon {horizon}")
    lams = np.broadcast_to(np.asarray(lams, float), (horizon,))
    T = n_f + 1 + horizon
    th = np.empty((B, T))
    om = np.empty((B, T))
    th[:, :n_f + 1] = seed_states[:, :, IPSI] - seed_states[:, :, IZETA]
    om[:, :n_f + 1] = seed_states[:, :, IOMEGA]
    wpsi = inputs[:, :, 0] * np.tan(inputs[:, :, 1]) / model.geom.l
    flat_u = inputs.reshape(B, -1)
    dt = model.dt
    nom, res = model.nominal_net, model.residual_net
    keep = targets is not None and trainable is not None
    caches = []
    for k in range(horizon):
        i = k + n_f
        feat = np.concatenate((th[:, k:i + 1], om[:, k:i + 1], flat_u[:, 2 * k:2 * (i + 1)]), axis=1)
        yf, af = nom.forward_cache(feat)
        ae = None
        if lams[k] != 0.0:
            ye, ae = res.forward_cache(feat)
            y = yf + lams[k] * ye
        else:
            y = yf
        om[:, i + 1] = y
        th[:, i + 1] = th[:, i] + dt * (wpsi[:, i] - om[:, i])
        if keep:
            caches.append((af, ae))
    pred = om[:, n_f + 1:]
    if targets is None:
        return pred
    err = pred - targets
    loss = float(np.sum(np.mean(err ** 2, axis=0)))
    if trainable is None:
        return pred, loss, None
    net = nom if trainable == "nominal" else res
    grads = [np.zeros_like(p) for p in net.params()]
    a_th = np.zeros((B, T))
    a_om = np.zeros((B, T))
    a_om[:, n_f + 1:] = 2.0 * err / B
    n_th = n_f + 1
    for k in range(horizon - 1, -1, -1):
        i = k + n_f
        up = a_om[:, i + 1]
        af, ae = caches[k]
        gp, dx = nom.backward_batch(af, up, want_input_grad=True)
        if trainable == "nominal":
            for g, d in zip(grads, gp):
                g += d
        if ae is not None:
            gp, dxe = res.backward_batch(ae, lams[k] * up, want_input_grad=True)
            dx = dx + dxe
            if trainable == "residual":
                for g, d in zip(grads, gp):
                    g += d
        a_th[:, k:i + 1] += dx[:, :n_th]
        a_om[:, k:i + 1] += dx[:, n_th:2 * n_th]
        # theta[i+1] = theta[i] + dt * (wpsi[i] - omega[i])
        a_th[:, i] += a_th[:, i + 1]
        a_om[:, i] -= dt * a_th[:, i + 1]
    return pred, loss, grads


def split_sample(states: np.ndarray, inputs: np.ndarray, n_f: int, horizon: int):
    """Seed frames, driving inputs and target yaw rates from a ``(x_{-n_f:N}, u_{-n_f:N})`` sample."""
    if states.shape[-2] != n_f + horizon + 1 or inputs.shape[-2] < n_f + horizon:
        raise InvalidInputError(f"sample must hold {n_f + horizon + 1} states and >= {n_f + horizon} inputs")
    return states[..., :n_f + 1, :], inputs[..., :n_f + horizon, :], states[..., n_f + 1:, IOMEGA]


def train_nominal_epoch(batches, net: MlpNetwork, adam: AdamState, N: int, model: HybridModel) -> float:
    """Rolling-prediction training over a group of batches with a single optimizer step.

    Each batch is ``(states (B, n_f + N + 1, 5), inputs (B, >= n_f + N, 2))``.
    Loss terms from every batch and step are summed before the one update.
    ``net`` is updated in place; ``model`` supplies dt, wheelbase and n_f.
    """
    m = replace(model, nominal_net=net, s_e=0)
    total = 0.0
    grads = [np.zeros_like(p) for p in net.params()]
    for states, inputs in batches:
        seed, u, target = split_sample(np.asarray(states, float), np.asarray(inputs, float), m.n_f, N)
        _, loss, g = rolling_predict(seed, u, N, m, 0.0, trainable="nominal", targets=target)
        total += loss
        for a, b in zip(grads, g):
            a += b
    net.set_params(adam_step(net.params(), grads, adam))
    return total


def rolling_loss(batches, model: HybridModel, N: int, lams=0.0) -> float:
    total = 0.0
    for states, inputs in batches:
        seed, u, target = split_sample(np.asarray(states, float), np.asarray(inputs, float), model.n_f, N)
        total += rolling_predict(seed, u, N, model, lams, targets=target)[1]
    return total


def make_windows(states: np.ndarray, inputs: np.ndarray, n_f: int, horizon: int, stride: int = 1):
    """All samples of ``n_f + horizon + 1`` consecutive frames from one trajectory."""
    length = n_f + horizon + 1
    T = len(states)
    if T < length:
        return np.empty((0, length, 5)), np.empty((0, length - 1, 2))
    starts = np.arange(0, T - length + 1, stride)
    idx = starts[:, None] + np.arange(length)
    return states[idx], inputs[idx[:, :-1]]


@dataclass
class OnlineTrainer:
    """Adam state plus settings for the sliding-window residual update."""

    n_t: int = 200
    horizon: int = 5
    budget: int = 20
    adam: AdamState = field(default_factory=lambda: AdamState(lr_initial=3e-3, lr_final=3e-3))


def online_residual_update(states: np.ndarray, inputs: np.ndarray, model: HybridModel, adam: AdamState,
                           budget: int, horizon: int = 5) -> MlpNetwork:
    """Fit the residual net on a recent trajectory slice; returns a new net.

    The combined model ``f + e`` is rolled ``horizon`` steps from every window in
    the slice and only ``e`` is updated, so at one step this regresses
    ``measured omega - f`` directly. The nominal net is never touched.
    """
    net = model.residual_net.copy()
    if budget <= 0:
        return net
    S, U = make_windows(np.asarray(states, float), np.asarray(inputs, float), model.n_f, horizon)
    if len(S) == 0:
        return net
    seed, u, target = split_sample(S, U, model.n_f, horizon)
    m = model.with_residual(net)
    for _ in range(budget):
        _, _, g = rolling_predict(seed, u, horizon, m, 1.0, trainable="residual", targets=target)
        net.set_params(adam_step(net.params(), g, adam))
    return net


# -- monitor ---------------------------------------------------------------------

class PerformanceMonitor:
    """Keeps the last ``n_e + n_f + 1`` measured frames and the derived switch."""

    def __init__(self, n_e: int = 15, epsilon: float = 0.5, n_f: int = 3):
        if n_e < 2:
            raise InvalidInputError("n_e must be >= 2")
        self.n_e = n_e
        self.epsilon = epsilon
        self.n_f = n_f
        self.states: deque = deque(maxlen=n_e + n_f + 1)
        self.inputs: deque = deque(maxlen=n_e + n_f + 1)
        self.sigma_f = self.sigma_fe = self.sigma_w = float("nan")
        self.s_e = 0
        self.valid = False

    def push(self, state, u) -> None:
        """Append a measured frame; ``u`` is the input applied from that state on."""
        self.states.append(np.asarray(state.as_array() if isinstance(state, SystemState) else state, float))
        self.inputs.append(np.asarray(u.as_array() if isinstance(u, ControlInput) else u, float))

    @property
    def ready(self) -> bool:
        return len(self.states) == self.states.maxlen

    def snapshot(self) -> dict:
        return dict(sigma_f=self.sigma_f, sigma_fe=self.sigma_fe, sigma_w=self.sigma_w,
                    s_e=self.s_e, valid=self.valid)


def switch_rule(sigma_f: float, sigma_fe: float, epsilon: float) -> int:
    """Residual on iff the combined model beats the nominal by the ratio ``epsilon``."""
    return int(sigma_fe < epsilon * sigma_f)


def update_monitor(monitor: PerformanceMonitor, model: HybridModel) -> tuple[float, float, float, int]:
    """Replay the last ``n_e`` steps under each mode and set the residual switch."""
    if not monitor.ready:
        monitor.valid = False
        monitor.s_e = 0
        monitor.sigma_f = monitor.sigma_fe = monitor.sigma_w = float("nan")
        return monitor.sigma_f, monitor.sigma_fe, monitor.sigma_w, 0
    n_f, n_e = monitor.n_f, monitor.n_e
    S = np.array(monitor.states)[None]
    U = np.array(monitor.inputs)[None]
    seed, u, target = split_sample(S, U, n_f, n_e)
    sig = {}
    for mode, lams in (("nominal", 0.0), ("unweighted", 1.0)):
        sig[mode] = rolling_predict(seed, u, n_e, model, lams, targets=target)[1] / n_e
    sigma_f, sigma_fe = sig["nominal"], sig["unweighted"]
    s_e = switch_rule(sigma_f, sigma_fe, monitor.epsilon)
    if s_e:
        lams = mode_weights("weighted", model.with_switch(1), n_e)
        sigma_w = rolling_predict(seed, u, n_e, model, lams, targets=target)[1] / n_e
    else:
        sigma_w = sigma_f
    monitor.sigma_f, monitor.sigma_fe, monitor.sigma_w = sigma_f, sigma_fe, sigma_w
    monitor.s_e, monitor.valid = s_e, True
    return sigma_f, sigma_fe, sigma_w, s_e


class ModelStore:
    """Atomic hand-over of immutable model snapshots between trainer and planner."""

    def __init__(self, model: HybridModel):
        self._lock = threading.Lock()
        self._model = model

    def snapshot(self) -> HybridModel:
        with self._lock:
            return self._model

    def publish_residual(self, net: MlpNetwork) -> None:
        with self._lock:
            self._model = self._model.with_residual(net)


# -- offline fitting ---------------------------------------------------------------

def trajectory_windows(trajectories, n_f: int, horizon: int, stride: int = 1):
    parts = [make_windows(t.states, t.inputs, n_f, horizon, stride) for t in trajectories]
    parts = [p for p in parts if len(p[0])]
    if not parts:
        return np.empty((0, n_f + horizon + 1, 5)), np.empty((0, n_f + horizon, 2))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def fit_normalizer_from(trajectories, n_f: int) -> tuple[np.ndarray, np.ndarray]:
    S, U = trajectory_windows(trajectories, n_f, 1, stride=1)
    S, U = S[:, :n_f + 1], U[:, :n_f + 1]
    feats = np.concatenate((S[:, :, IPSI] - S[:, :, IZETA], S[:, :, IOMEGA], U.reshape(len(U), -1)), axis=1)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    return mean, np.where(std > 1e-6, std, 1.0)


@dataclass
class FitReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")


def fit_nominal(train, val, model: HybridModel, epochs: int, N: int, batch_size: int = 256,
                adam: AdamState | None = None, seed: int = 0, stride: int = 1,
                log=None) -> tuple[MlpNetwork, FitReport]:
    """Offline rolling-prediction training; returns the best-validation net.

    One optimizer step per minibatch (each minibatch is its own batch group).
    Loss values are per-window averages summed over the horizon.
    """
    rng = np.random.default_rng(seed)
    net = model.nominal_net.copy()
    adam = adam or AdamState(decay_epochs=max(epochs, 1))
    S, U = trajectory_windows(train, model.n_f, N, stride)
    if len(S) == 0:
        raise InvalidInputError("no training windows; trajectories too short")
    vS, vU = trajectory_windows(val, model.n_f, N, stride) if val else (S[:0], U[:0])
    report = FitReport()

    def evaluate(n):
        if len(vS) == 0:
            return float("nan")
        m = replace(model, nominal_net=n, s_e=0)
        seed_, u, tgt = split_sample(vS, vU, model.n_f, N)
        return rolling_predict(seed_, u, N, m, 0.0, targets=tgt)[1]

    best = net.copy()
    for epoch in range(epochs):
        adam.epoch = epoch
        order = rng.permutation(len(S))
        losses = []
        for start in range(0, len(S), batch_size):
            idx = order[start:start + batch_size]
            losses.append(train_nominal_epoch([(S[idx], U[idx])], net, adam, N, model))
        tl = float(np.mean(losses))
        vl = evaluate(net)
        report.train_loss.append(tl)
        report.val_loss.append(vl)
        score = vl if len(vS) else tl
        if score < report.best_val:
            report.best_val, report.best_epoch, best = score, epoch, net.copy()
        if log:
            log(epoch, tl, vl)
    return best, report
