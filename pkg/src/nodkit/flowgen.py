"""Desk-scale rectified flow with a frozen base and a trainable control residual.

Latents are flattened 2-D toy images. The path between noise ``z0`` and
data ``z1`` is linear, ``z_t = (1 - t) z0 + t z1``, so the regression target
is the constant velocity ``z1 - z0``. The base velocity model never changes;
only the control residual, whose output layer starts at zero, is trained.
The decoder is the identity.
"""
from __future__ import annotations

import base64
import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, FormatError, NodkitError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nodkit-mlp"
CHECKPOINT_VERSION = 1

# hidden-layer layouts exercised by the gradient check
SHIPPED_HIDDEN = {"linear": (), "small": (16,), "default": (64,), "deep": (32, 32)}


class TrainingDiverged(NodkitError, FloatingPointError):
    pass


class MLP:
    """Dense network with tanh hidden layers and a linear output layer."""

    def __init__(self, sizes: Sequence[int], rng=None, scale: float = 1.0, zero_output: bool = False):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights, self.biases = [], []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if last and zero_output:
                w = np.zeros((n_out, n_in))
            else:
                w = rng.standard_normal((n_out, n_in)) * (scale / math.sqrt(n_in))
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def get_flat(self) -> np.ndarray:
        if not self.weights:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")

    def forward(self, x):
        acts = [x]
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < n - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        """Parameter gradients, in :meth:`params` order, for upstream ``dout``."""
        grads = []
        delta = dout
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            grads.append(delta.sum(axis=0))  # bias
            grads.append(delta.T @ acts[i])  # weight
            if i > 0:
                delta = (delta @ self.weights[i]) * (1.0 - acts[i] ** 2)
        grads.reverse()
        return grads


def _time_column(t, n):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1 and n != 1:
        t = np.full(n, float(t[0]))
    return t[:, None]


class VelocityModel:
    """Base velocity field ``v(z_t, t)``; treated as frozen."""

    def __init__(self, dim: int, hidden: Sequence[int] = (64,), seed: int = 0, scale: float = 0.5):
        self.dim = int(dim)
        self.hidden = tuple(hidden)
        self.seed = seed
        self.net = MLP((self.dim + 1, *self.hidden, self.dim), np.random.default_rng(seed), scale)

    def __call__(self, z, t):
        z = np.atleast_2d(z)
        return self.net.forward(np.hstack([z, _time_column(t, len(z))]))[0]


class ControlResidual:
    """Conditioning branch ``g(c, z_t, t)`` added to the base velocity.

    The output layer is zero-initialised, so an untrained residual is
    exactly zero everywhere. ``use_latent=False`` drops ``z_t`` from the
    input and yields ``g(c, t)``.
    """

    def __init__(self, dim: int, cond_dim: int, hidden: Sequence[int] = (64,), seed: int = 1,
                 use_latent: bool = True):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.hidden = tuple(hidden)
        self.seed = seed
        self.use_latent = bool(use_latent)
        n_in = (self.dim if self.use_latent else 0) + 1 + self.cond_dim
        self.net = MLP((n_in, *self.hidden, self.dim), np.random.default_rng(seed), zero_output=True)

    def inputs(self, c, z, t):
        z = np.atleast_2d(z)
        c = np.atleast_2d(c)
        if len(c) == 1 and len(z) != 1:
            c = np.repeat(c, len(z), axis=0)
        parts = ([z] if self.use_latent else []) + [_time_column(t, len(z)), c]
        return np.hstack(parts)

    def __call__(self, c, z, t):
        return self.net.forward(self.inputs(c, z, t))[0]


@dataclass(frozen=True)
class ToySample:
    z0: np.ndarray
    z1: np.ndarray
    c: np.ndarray
    nodule: np.ndarray  # boolean, length D


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-5
    lambda_reg: float = 1.0
    nodule_weight: float = 100.0
    seed: int = 0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise DomainError("learning_rate must be >= 0")
        if self.lambda_reg < 0:
            raise DomainError("lambda_reg must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise DomainError("epochs, batch_size and steps_per_epoch must be >= 1")


def interpolate_latent(z0, z1, t):
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise DomainError(f"latent shapes differ: {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * z1


def loss_region(pred, target, nodule_sel, weight: float = 100.0) -> float:
    """Squared error weighted by ``weight`` on nodule entries, normalised by the weight sum."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sel = np.asarray(nodule_sel, dtype=bool)
    if pred.shape != target.shape or pred.shape != sel.shape:
        raise DomainError("pred, target and nodule_sel must have equal lengths")
    w = np.where(sel, float(weight), 1.0)
    return float(np.sum(w * (pred - target) ** 2) / np.sum(w))


def loss_total(l_ctrl: float, l_reg: float, lambda_reg: float) -> float:
    return l_ctrl + lambda_reg * l_reg


def _stack(batch):
    z0 = np.stack([s.z0 for s in batch])
    z1 = np.stack([s.z1 for s in batch])
    c = np.stack([s.c for s in batch])
    sel = np.stack([s.nodule for s in batch])
    return z0, z1, c, sel


def _forward(base, ctrl, batch, t_values):
    if len(batch) == 0:
        raise DomainError("empty batch")
    z0, z1, c, sel = _stack(batch)
    t = np.asarray(t_values, dtype=np.float64).reshape(-1)
    if t.size != len(batch):
        raise DomainError("need one t per sample")
    zt = interpolate_latent(z0, z1, t)
    x = ctrl.inputs(c, zt, t)
    g, acts = ctrl.net.forward(x)
    pred = base(zt, t) + g
    return pred - (z1 - z0), sel, acts


def loss_ctrl(base, ctrl, batch, t_values) -> float:
    """Mean over samples of the squared Euclidean velocity error."""
    r, _, _ = _forward(base, ctrl, batch, t_values)
    return float(np.mean(np.sum(r ** 2, axis=1)))


def _losses_and_grads(base, ctrl, batch, t_values, lambda_reg, nodule_weight, need_grad=True):
    r, sel, acts = _forward(base, ctrl, batch, t_values)
    n = r.shape[0]
    w = np.where(sel, float(nodule_weight), 1.0)
    wsum = w.sum(axis=1, keepdims=True)
    l_ctrl = float(np.mean(np.sum(r ** 2, axis=1)))
    l_reg = float(np.mean(np.sum(w * r ** 2, axis=1, keepdims=True) / wsum))
    total = loss_total(l_ctrl, l_reg, lambda_reg)
    if not need_grad:
        return total, l_ctrl, l_reg, None
    dout = (2.0 / n) * r + lambda_reg * (2.0 / n) * w * r / wsum
    return total, l_ctrl, l_reg, ctrl.net.backward(acts, dout)


def batch_loss(base, ctrl, batch, t_values, lambda_reg=1.0, nodule_weight=100.0) -> float:
    """``loss_total`` of a batch: control loss plus weighted region loss."""
    return _losses_and_grads(base, ctrl, batch, t_values, lambda_reg, nodule_weight, False)[0]


def analytic_gradient(base, ctrl, batch, t_values, lambda_reg=1.0, nodule_weight=100.0) -> np.ndarray:
    grads = _losses_and_grads(base, ctrl, batch, t_values, lambda_reg, nodule_weight)[3]
    return np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)


def gradient_check(base, ctrl, batch, t_values, epsilon: float = 1e-5, lambda_reg: float = 1.0,
                   nodule_weight: float = 100.0, grad_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``grad_fn(base, ctrl, batch, t_values, lambda_reg, nodule_weight)``
    replaces the analytic gradient (used for fault injection).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError("epsilon must lie in [1e-7, 1e-3]")
    grad_fn = grad_fn or analytic_gradient
    ga = np.asarray(grad_fn(base, ctrl, batch, t_values, lambda_reg, nodule_weight))
    theta = ctrl.net.get_flat()
    if theta.size == 0:
        return 0.0
    gn = np.empty_like(theta)
    try:
        for i in range(theta.size):
            orig = theta[i]
            theta[i] = orig + epsilon
            ctrl.net.set_flat(theta)
            up = batch_loss(base, ctrl, batch, t_values, lambda_reg, nodule_weight)
            theta[i] = orig - epsilon
            ctrl.net.set_flat(theta)
            down = batch_loss(base, ctrl, batch, t_values, lambda_reg, nodule_weight)
            theta[i] = orig
            gn[i] = (up - down) / (2.0 * epsilon)
    finally:
        ctrl.net.set_flat(theta)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-12)
    return float(np.max(np.abs(ga - gn) / denom))


@dataclass
class TrainResult:
    ctrl: ControlResidual
    history: list = field(default_factory=list)  # per-epoch mean loss_total
    steps: int = 0


def train(base, ctrl: ControlResidual, data: Iterable, cfg: TrainConfig) -> TrainResult:
    """Plain SGD on ``loss_total``; returns a trained copy of ``ctrl``.

    ``t`` is drawn uniformly from [0, 1) per sample from a stream seeded by
    ``cfg.seed``; ``data`` yields :class:`ToySample` and owns its own seed.
    """
    ctrl = copy.deepcopy(ctrl)
    rng = np.random.default_rng(cfg.seed)
    it = iter(data)
    history, steps = [], 0
    params = ctrl.net.params()
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = [next(it) for _ in range(cfg.batch_size)]
            t = rng.random(cfg.batch_size)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, _, _, grads = _losses_and_grads(base, ctrl, batch, t, cfg.lambda_reg,
                                                      cfg.nodule_weight)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch + 1}, step {steps + 1}")
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
            losses.append(loss)
            steps += 1
        history.append(float(np.mean(losses)))
        logger.debug("epoch %d mean loss %.6g", epoch + 1, history[-1])
    return TrainResult(ctrl, history, steps)


def sample_euler(base, ctrl, c, steps: int = 50, seed: int = 0, z_init=None) -> np.ndarray:
    """Integrate the combined velocity from noise at t=0 to data at t=1.

    ``z_init`` overrides the seeded standard-normal start.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    dim = ctrl.dim if ctrl is not None else base.dim
    if z_init is None:
        z = np.random.default_rng(seed).standard_normal(dim)
    else:
        z = np.array(z_init, dtype=np.float64)
    z = z[None, :]
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    h = 1.0 / steps
    for k in range(steps):
        t = np.array([k / steps])
        v = base(z, t)
        if ctrl is not None:
            v = v + ctrl(c, z, t)
        z = z + h * v
    return z[0]


# ---------------------------------------------------------------------------
# toy data

def disk_mask(grid: int, center, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid]
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius ** 2


def conditioning_vector(nodule_mask, spacing=(1.0, 1.0, 1.0), body_mask=None) -> np.ndarray:
    nodule = np.asarray(nodule_mask, dtype=bool)
    body = np.ones_like(nodule) if body_mask is None else np.asarray(body_mask, dtype=bool)
    return np.concatenate([body.ravel().astype(np.float64), nodule.ravel().astype(np.float64),
                           np.asarray(spacing, dtype=np.float64)])


class ToyDataGenerator:
    """Endless stream of toy samples for mask-conditioned generation.

    ``z1`` is a two-level image (``background`` outside the nodule mask,
    ``background + contrast`` inside) plus Gaussian noise; ``z0`` is
    standard normal. When several masks are given one is drawn per sample.
    """

    def __init__(self, grid: int, nodule_masks, seed: int = 0, background: float = -0.5,
                 contrast: float = 2.0, noise: float = 0.1, spacing=(1.0, 1.0, 1.0)):
        masks = np.asarray(nodule_masks, dtype=bool)
        if masks.ndim == 2:
            masks = masks[None]
        if masks.shape[1:] != (grid, grid):
            raise DomainError(f"masks must be {grid}x{grid}, got {masks.shape[1:]}")
        self.grid = grid
        self.masks = masks
        self.background = background
        self.contrast = contrast
        self.noise = noise
        self.spacing = tuple(spacing)
        self.rng = np.random.default_rng(seed)
        self.conds = np.stack([conditioning_vector(m, spacing) for m in masks])

    @property
    def dim(self) -> int:
        return self.grid * self.grid

    @property
    def cond_dim(self) -> int:
        return self.conds.shape[1]

    def template(self, index: int = 0) -> np.ndarray:
        return self.background + self.contrast * self.masks[index].ravel().astype(np.float64)

    def __iter__(self):
        return self

    def __next__(self) -> ToySample:
        j = int(self.rng.integers(len(self.masks))) if len(self.masks) > 1 else 0
        z1 = self.template(j)
        if self.noise:
            z1 = z1 + self.noise * self.rng.standard_normal(self.dim)
        z0 = self.rng.standard_normal(self.dim)
        return ToySample(z0, z1, self.conds[j].copy(), self.masks[j].ravel().copy())


def toy_data_generator(grid: int, nodule_mask, seed: int = 0, **kwargs) -> ToyDataGenerator:
    return ToyDataGenerator(grid, nodule_mask, seed, **kwargs)


def mask_contrast(z, mask) -> float:
    """Mean of ``z`` inside ``mask`` minus mean outside."""
    m = np.asarray(mask, dtype=bool).ravel()
    z = np.asarray(z).ravel()
    return float(z[m].mean() - z[~m].mean())


# ---------------------------------------------------------------------------
# checkpoints

def _encode(arr) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text, shape):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape).astype(np.float64)


def save_model(model, path, config: Optional[dict] = None) -> None:
    """Write a model as JSON; parameters are base64 little-endian float64."""
    if isinstance(model, ControlResidual):
        kind = "control"
        spec = {"dim": model.dim, "cond_dim": model.cond_dim, "hidden": list(model.hidden),
                "seed": model.seed, "use_latent": model.use_latent}
    elif isinstance(model, VelocityModel):
        kind = "velocity"
        spec = {"dim": model.dim, "hidden": list(model.hidden), "seed": model.seed}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    layers = [{"weight_shape": list(w.shape), "weight": _encode(w),
               "bias_shape": list(b.shape), "bias": _encode(b)}
              for w, b in zip(model.net.weights, model.net.biases)]
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind,
           "model": spec, "layers": layers, "config": config or {}}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_model(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = doc["model"]
    if doc["kind"] == "control":
        model = ControlResidual(spec["dim"], spec["cond_dim"], spec["hidden"], spec["seed"],
                                spec["use_latent"])
    elif doc["kind"] == "velocity":
        model = VelocityModel(spec["dim"], spec["hidden"], spec["seed"])
    else:
        raise FormatError(f"{path}: unknown model kind {doc['kind']!r}")
    if len(doc["layers"]) != len(model.net.weights):
        raise FormatError(f"{path}: layer count does not match model spec")
    for i, layer in enumerate(doc["layers"]):
        model.net.weights[i] = _decode(layer["weight"], layer["weight_shape"])
        model.net.biases[i] = _decode(layer["bias"], layer["bias_shape"])
    return model


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(history, start=1):
            w.writerow([i, repr(float(loss))])
