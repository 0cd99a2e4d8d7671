"""Dense tanh MLP with analytic parameter gradients and input Jacobians, plus Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import InvalidInputError

FORMAT_NAME = "trailernav-mlp"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    """Malformed weight blob; ``position`` is the 1-based line number."""

    def __init__(self, msg: str, position: int | None = None):
        self.position = position
        super().__init__(msg if position is None else f"line {position}: {msg}")


class UnsupportedVersionError(WeightFileError):
    pass


class MlpNetwork:
    """Feed-forward net: tanh hidden layers, linear scalar output.

    Inputs are standardised as ``(x - mean) / scale`` before the first layer.
    ``weights[i]`` has shape ``(out, in)``.
    """

    def __init__(self, layer_sizes, weights, biases, mean=None, scale=None):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2 or self.layer_sizes[-1] != 1:
            raise InvalidInputError(f"bad layer sizes {self.layer_sizes}")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise InvalidInputError(f"layer {i}: expected {shape}, got {w.shape}/{b.shape}")
        n_in = self.layer_sizes[0]
        self.mean = np.zeros(n_in) if mean is None else np.array(mean, dtype=float)
        self.scale = np.ones(n_in) if scale is None else np.array(scale, dtype=float)
        if self.mean.shape != (n_in,) or self.scale.shape != (n_in,) or np.any(self.scale <= 0):
            raise InvalidInputError("normalizer must match input width with positive scale")

    @classmethod
    def initialize(cls, layer_sizes, rng: np.random.Generator, zero_output: bool = False) -> "MlpNetwork":
        """Xavier-uniform weights, zero biases."""
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = math.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        if zero_output:
            weights[-1][:] = 0.0
        return cls(layer_sizes, weights, biases)

    @classmethod
    def zeros(cls, layer_sizes) -> "MlpNetwork":
        return cls(layer_sizes,
                   [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
                   [np.zeros(o) for o in layer_sizes[1:]])

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(self.layer_sizes, self.weights, self.biases, self.mean, self.scale)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params) -> None:
        self.weights = [np.array(p, float) for p in params[0::2]]
        self.biases = [np.array(p, float) for p in params[1::2]]

    def fit_normalizer(self, features: np.ndarray) -> None:
        features = np.asarray(features, float)
        self.mean = features.mean(axis=0)
        std = features.std(axis=0)
        self.scale = np.where(std > 1e-6, std, 1.0)

    def is_zero(self) -> bool:
        return all(not np.any(w) for w in self.weights) and all(not np.any(b) for b in self.biases)

    # -- evaluation -----------------------------------------------------------

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.n_inputs:
            raise InvalidInputError(f"expected {self.n_inputs} features, got {x.shape[-1]}")

    def _activations(self, x: np.ndarray) -> list[np.ndarray]:
        # works for a single vector (d,) or a batch (B, d)
        h = (x - self.mean) / self.scale
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return acts

    def forward(self, x) -> float:
        x = np.asarray(x, float)
        self._check(x)
        return float(self._activations(x)[-1][0])

    def forward_batch(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        self._check(X)
        return self._activations(X)[-1][:, 0]

    def _input_grad(self, acts, upstream):
        # reverse pass without parameter gradients; acts from _activations
        g = upstream * self.weights[-1][0] if np.ndim(upstream) == 0 else upstream[..., None] * self.weights[-1][0]
        for i in range(len(self.weights) - 2, -1, -1):
            g = g * (1.0 - acts[i + 1] ** 2)
            g = g @ self.weights[i]
        return g / self.scale

    def forward_and_jacobian(self, x) -> tuple[float, np.ndarray]:
        x = np.asarray(x, float)
        self._check(x)
        acts = self._activations(x)
        return float(acts[-1][0]), self._input_grad(acts, 1.0)

    def input_jacobian(self, x) -> np.ndarray:
        return self.forward_and_jacobian(x)[1]

    def forward_cache(self, X):
        """Batch forward that keeps activations for ``backward_batch``."""
        X = np.asarray(X, float)
        self._check(X)
        acts = self._activations(X)
        return acts[-1][:, 0], acts

    def backward_batch(self, acts, upstream, want_input_grad: bool = True):
        """Reverse pass for a batch given per-sample upstream gradients ``(B,)``.

        Returns ``(param_grads, input_grads)``; parameter gradients are summed
        over the batch and ordered like ``params()``.
        """
        upstream = np.asarray(upstream, float)
        n = len(self.weights)
        grads = [None] * (2 * n)
        g = upstream[:, None]  # dL/dz of output layer
        for i in range(n - 1, -1, -1):
            grads[2 * i] = g.T @ acts[i]
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or want_input_grad:
                g = g @ self.weights[i]
                if i > 0:
                    g = g * (1.0 - acts[i] ** 2)
        dx = g / self.scale if want_input_grad else None
        return grads, dx

    def backward(self, x, upstream: float = 1.0) -> list[np.ndarray]:
        """Parameter gradients of ``upstream * forward(x)`` for a single input."""
        x = np.asarray(x, float)
        self._check(x)
        acts = self._activations(x[None])
        grads, _ = self.backward_batch(acts, np.array([upstream]), want_input_grad=False)
        return grads

    def folded(self) -> "FoldedMlp":
        return FoldedMlp(self)

    # -- persistence ----------------------------------------------------------

    def serialize(self) -> str:
        lines = [f"{FORMAT_NAME} {FORMAT_VERSION}",
                 "layers " + " ".join(str(s) for s in self.layer_sizes),
                 "mean " + " ".join(repr(float(v)) for v in self.mean),
                 "scale " + " ".join(repr(float(v)) for v in self.scale)]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            lines.append(f"weight {i}")
            lines += [" ".join(repr(float(v)) for v in row) for row in w]
            lines.append(f"bias {i} " + " ".join(repr(float(v)) for v in b))
        lines.append("end")
        return "\n".join(lines) + "\n"

    @classmethod
    def deserialize(cls, blob: str) -> "MlpNetwork":
        lines = blob.splitlines()
        pos = 0

        def take(prefix: str) -> list[str]:
            nonlocal pos
            if pos >= len(lines):
                raise WeightFileError(f"unexpected end of data, expected '{prefix}'", pos + 1)
            parts = lines[pos].split()
            if not parts or parts[0] != prefix:
                raise WeightFileError(f"expected '{prefix}'", pos + 1)
            pos += 1
            return parts[1:]

        def floats(parts: list[str], n: int) -> np.ndarray:
            if len(parts) != n:
                raise WeightFileError(f"expected {n} values, got {len(parts)}", pos)
            try:
                return np.array([float(p) for p in parts])
            except ValueError as exc:
                raise WeightFileError(str(exc), pos) from None

        head = take(FORMAT_NAME)
        if len(head) != 1 or not head[0].isdigit():
            raise WeightFileError("missing format version", 1)
        if int(head[0]) != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported weight format version {head[0]}", 1)
        try:
            sizes = [int(s) for s in take("layers")]
        except ValueError:
            raise WeightFileError("bad layer sizes", pos) from None
        if len(sizes) < 2:
            raise WeightFileError("need at least two layer sizes", pos)
        mean = floats(take("mean"), sizes[0])
        scale = floats(take("scale"), sizes[0])
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if take("weight") != [str(i)]:
                raise WeightFileError(f"expected weight block {i}", pos)
            rows = []
            for _ in range(n_out):
                if pos >= len(lines):
                    raise WeightFileError("unexpected end of data inside weight block", pos + 1)
                pos += 1
                rows.append(floats(lines[pos - 1].split(), n_in))
            weights.append(np.array(rows))
            parts = take("bias")
            if not parts or parts[0] != str(i):
                raise WeightFileError(f"expected bias {i}", pos)
            biases.append(floats(parts[1:], n_out))
        take("end")
        try:
            return cls(sizes, weights, biases, mean, scale)
        except InvalidInputError as exc:
            raise WeightFileError(str(exc), pos) from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path) -> "MlpNetwork":
        with open(path) as fh:
            return cls.deserialize(fh.read())


class FoldedMlp:
    """Read-only snapshot with the input normalisation folded into the first layer.

    Used on the planner's hot path; values match ``MlpNetwork`` to rounding.
    """

    def __init__(self, net: MlpNetwork):
        w0 = net.weights[0] / net.scale
        self.W = [w0] + [np.array(w) for w in net.weights[1:]]
        self.WT = [np.ascontiguousarray(w.T) for w in self.W]
        self.b = [net.biases[0] - w0 @ net.mean] + [np.array(b) for b in net.biases[1:]]
        self.out_w = self.W[-1][0].copy()
        self.out_b = float(self.b[-1][0])

    def value(self, X: np.ndarray) -> np.ndarray:
        h = X
        for wt, b in zip(self.WT[:-1], self.b[:-1]):
            h = np.tanh(h @ wt + b)
        return h @ self.out_w + self.out_b

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        acts = []
        h = x
        for wt, b in zip(self.WT[:-1], self.b[:-1]):
            h = np.tanh(h @ wt + b)
            acts.append(h)
        g = self.out_w
        for i in range(len(acts) - 1, -1, -1):
            g = (g * (1.0 - acts[i] * acts[i])) @ self.W[i]
        return float(h @ self.out_w) + self.out_b, g

    def grad_batch(self, X: np.ndarray) -> np.ndarray:
        """Input gradients ``(B, d)`` for a batch of inputs."""
        acts = []
        h = X
        for wt, b in zip(self.WT[:-1], self.b[:-1]):
            h = np.tanh(h @ wt + b)
            acts.append(h)
        g = np.broadcast_to(self.out_w, h.shape)
        for i in range(len(acts) - 1, -1, -1):
            g = (g * (1.0 - acts[i] * acts[i])) @ self.W[i]
        return g


class FusedPair:
    """``a(x) + lam * b(x)`` for two tanh MLPs in one pass (``b`` optional).

    Both nets share the input; ``b`` may be shallower than ``a``, in which case
    its output rides along ``a``'s later layers as a linear unit.
    """

    def __init__(self, a: MlpNetwork, b: MlpNetwork | None = None):
        fa = a.folded()
        fb = b.folded() if b is not None else None
        na = len(fa.W)
        nb = len(fb.W) if fb is not None else 0
        if nb > na:
            raise ValueError("second net must not be deeper than the first")
        self.W, self.b, self.n_tanh = [], [], []
        for i in range(na - 1):
            wa, ba = fa.W[i], fa.b[i]
            if fb is None:
                self.W.append(wa)
                self.b.append(ba)
                self.n_tanh.append(wa.shape[0])
                continue
            if i < nb:
                wb, bb = fb.W[i], fb.b[i]
            else:  # carry b's scalar output unchanged
                wb, bb = np.ones((1, 1)), np.zeros(1)
            W = np.zeros((wa.shape[0] + wb.shape[0], (wa.shape[1] + wb.shape[1]) if i else wa.shape[1]))
            if i == 0:
                W[:wa.shape[0]] = wa
                W[wa.shape[0]:] = wb
            else:
                W[:wa.shape[0], :wa.shape[1]] = wa
                W[wa.shape[0]:, wa.shape[1]:] = wb
            self.W.append(W)
            self.b.append(np.concatenate((ba, bb)))
            # tanh on a's units; b's units are tanh until its output layer
            self.n_tanh.append(wa.shape[0] + (wb.shape[0] if i < nb - 1 else 0))
        self.WT = [np.ascontiguousarray(w.T) for w in self.W]
        self.out_a = fa.W[-1][0]
        self.out_bias = float(fa.b[-1][0])
        self.n_a = fa.W[-2].shape[0] if na > 1 else fa.W[-1].shape[1]
        self.b_head = None
        self.b_carried = fb is not None and nb < na
        if fb is not None and nb == na:  # b's output layer sits beside a's
            self.b_head = (fb.W[-1][0], float(fb.b[-1][0]))
        if na == 1:
            raise ValueError("nets need at least one hidden layer")

    def _hidden(self, X):
        acts = []
        h = X
        for wt, b, nt in zip(self.WT, self.b, self.n_tanh):
            h = h @ wt + b
            if nt == h.shape[-1]:
                np.tanh(h, out=h)
            else:
                np.tanh(h[..., :nt], out=h[..., :nt])
            acts.append(h)
        return acts

    def head(self, lam):
        """Output weights over the last hidden layer for mixing weight(s) ``lam``."""
        lam = np.asarray(lam, float)
        c = np.zeros(lam.shape + (self.W[-1].shape[0],))
        c[..., :self.n_a] = self.out_a
        if self.b_carried:
            c[..., self.n_a] = lam
        elif self.b_head is not None:
            c[..., self.n_a:] = lam[..., None] * self.b_head[0]
        off = self.out_bias + lam * (self.b_head[1] if self.b_head is not None else 0.0)
        return c, off

    def value(self, X, c, off):
        return self._hidden(X)[-1] @ c + off

    def grad_batch(self, X, C):
        """Input gradients ``(B, d)`` with per-row output weights ``C (B, h)``."""
        acts = self._hidden(X)
        g = C
        for i in range(len(acts) - 1, -1, -1):
            nt = self.n_tanh[i]
            g = g.copy()
            g[:, :nt] *= 1.0 - acts[i][:, :nt] ** 2
            g = g @ self.W[i]
        return g


@dataclass
class AdamState:
    """Adam moments plus an exponential learning-rate schedule.

    ``lr = lr_initial * (lr_final / lr_initial) ** (epoch / max(decay_epochs - 1, 1))``
    clamped to ``[lr_final, lr_initial]``.
    """

    lr_initial: float = 1e-2
    lr_final: float = 1e-5
    decay_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    epoch: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @property
    def lr(self) -> float:
        if self.decay_epochs <= 1 or self.lr_initial == self.lr_final:
            return self.lr_initial
        frac = min(self.epoch / (self.decay_epochs - 1), 1.0)
        lr = self.lr_initial * (self.lr_final / self.lr_initial) ** frac
        lo, hi = sorted((self.lr_final, self.lr_initial))
        return min(max(lr, lo), hi)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], adam: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update; mutates ``adam`` and returns new parameter arrays."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise InvalidInputError("parameter / gradient shape mismatch")
    if not adam.m:
        adam.m = [np.zeros_like(p) for p in params]
        adam.v = [np.zeros_like(p) for p in params]
    elif any(m.shape != p.shape for m, p in zip(adam.m, params)) or len(adam.m) != len(params):
        raise InvalidInputError("Adam moments do not match parameters")
    adam.step_count += 1
    t = adam.step_count
    lr = adam.lr
    c1 = 1.0 - adam.beta1 ** t
    c2 = 1.0 - adam.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        adam.m[i] = adam.beta1 * adam.m[i] + (1 - adam.beta1) * g
        adam.v[i] = adam.beta2 * adam.v[i] + (1 - adam.beta2) * g * g
        out.append(p - lr * (adam.m[i] / c1) / (np.sqrt(adam.v[i] / c2) + adam.eps))
    return out
