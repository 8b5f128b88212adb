"""Conditional affine coupling flows.

A model maps a target ``y`` (length d) and an optional context ``x`` (length c)
to a latent ``z = h(y, x)``.  Each coupling layer keeps a subset of the
coordinates fixed and applies ``y_T * exp(s) + t`` to the rest, where the
log-scale ``s`` and shift ``t`` come from two separate MLPs fed with the fixed
coordinates concatenated with the context.

All public functions accept a single vector or a batch (one point per row).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from japan.numcore import (
    LOG_2PI,
    AdamState,
    DimensionError,
    MlpParams,
    Rng,
    TrainingDivergenceError,
    adam_update,
    gaussian_sample,
    init_mlp,
    log_gaussian_density,
    mlp_backward_cached,
    mlp_forward_cached,
    mlp_rows,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    lr: float = 1e-3
    decay: float = 0.999
    n_layers: int = 4
    hidden: int = 32
    seed: int = 0
    s_max: float = 5.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_layers", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")
        if self.lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("TrainConfig needs lr > 0 and decay in (0, 1]")


@dataclass
class CouplingLayer:
    mask: np.ndarray  # bool, True marks pass-through coordinates
    scale_net: MlpParams
    shift_net: MlpParams
    s_max: float = 5.0

    def __post_init__(self):
        self.pass_idx = np.flatnonzero(self.mask)
        self.trans_idx = np.flatnonzero(~self.mask)


@dataclass
class FlowOutput:
    z: np.ndarray
    log_det: np.ndarray | float


def coupling_masks(d: int, n_layers: int) -> list[np.ndarray]:
    """Alternating even/odd pass-through masks.

    For d = 1 there is nothing to condition on, so every layer is a pure
    context-dependent affine map of the single coordinate.
    """
    masks = []
    for layer in range(n_layers):
        if d == 1:
            masks.append(np.zeros(1, dtype=bool))
        else:
            masks.append(np.arange(d) % 2 == layer % 2)
    return masks


class FlowModel:
    """Stack of coupling layers whose weights live in one flat float64 buffer."""

    def __init__(self, d: int, c: int, masks: list[np.ndarray], hidden: int,
                 theta: np.ndarray, s_max: float = 5.0, history: tuple[float, ...] = ()):
        if d < 1 or c < 0:
            raise DimensionError(f"invalid dimensions d={d}, c={c}")
        self.d, self.c, self.hidden, self.s_max = d, c, hidden, float(s_max)
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        self.shapes = self._shapes()
        size = sum(math.prod(s) for s in self.shapes)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (size,):
            raise DimensionError(f"expected {size} parameters, got {theta.shape}")
        self.theta = theta
        self.layers = self._bind(theta)
        self.history = tuple(history)

    def _shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for mask in self.masks:
            n_in = int(mask.sum()) + self.c
            n_out = int((~mask).sum())
            shapes += MlpParams.shapes(n_in, self.hidden, n_out) * 2
        return shapes

    def _views(self, buffer: np.ndarray) -> list[np.ndarray]:
        views, offset = [], 0
        for shape in self.shapes:
            size = math.prod(shape)
            views.append(buffer[offset:offset + size].reshape(shape))
            offset += size
        return views

    def _bind(self, buffer: np.ndarray) -> list[CouplingLayer]:
        views = self._views(buffer)
        layers = []
        for i, mask in enumerate(self.masks):
            chunk = views[12 * i:12 * (i + 1)]
            layers.append(CouplingLayer(mask, MlpParams.from_arrays(chunk[:6]),
                                        MlpParams.from_arrays(chunk[6:]), self.s_max))
        return layers

    @property
    def n_params(self) -> int:
        return self.theta.size

    @classmethod
    def create(cls, d: int, c: int = 0, n_layers: int = 4, hidden: int = 32,
               rng: Rng | None = None, s_max: float = 5.0) -> "FlowModel":
        """Fresh model; ``rng=None`` zero-initializes every net (identity flow)."""
        masks = coupling_masks(d, n_layers)
        arrays = []
        for mask in masks:
            n_in, n_out = int(mask.sum()) + c, int((~mask).sum())
            for _ in range(2):
                arrays += init_mlp(n_in, hidden, n_out, rng).arrays()
        theta = np.concatenate([a.ravel() for a in arrays])
        return cls(d, c, masks, hidden, theta, s_max)

    def with_theta(self, theta: np.ndarray, history: tuple[float, ...] = ()) -> "FlowModel":
        return FlowModel(self.d, self.c, self.masks, self.hidden, np.array(theta),
                         self.s_max, history)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        """Weights are emitted layer by layer, scale net then shift net, each as
        W1, b1, W2, b2, W3, b3 in row-major order, encoded as hex floats."""
        doc = {
            "format": "japan-flow",
            "version": FORMAT_VERSION,
            "d": self.d,
            "c": self.c,
            "n_layers": len(self.masks),
            "hidden": self.hidden,
            "s_max": float.hex(self.s_max),
            "masks": [[int(v) for v in m] for m in self.masks],
            "weights": [float.hex(float(v)) for v in self.theta],
            "history": [float.hex(float(v)) for v in self.history],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FlowModel":
        doc = json.loads(text)
        if doc.get("format") != "japan-flow":
            raise ValueError("not a serialized flow model")
        masks = [np.array(m, dtype=bool) for m in doc["masks"]]
        if len(masks) != doc["n_layers"]:
            raise ValueError("mask count does not match n_layers")
        theta = np.array([float.fromhex(v) for v in doc["weights"]])
        history = tuple(float.fromhex(v) for v in doc.get("history", []))
        return cls(doc["d"], doc["c"], masks, doc["hidden"], theta,
                   float.fromhex(doc["s_max"]), history)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# evaluation


def _as_batch(model: FlowModel, y, x) -> tuple[np.ndarray, np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != model.d:
        raise DimensionError(f"expected y with {model.d} coordinates, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite input to flow")
    n = y.shape[0]
    if model.c == 0:
        if x is not None and np.size(x) > 0:
            raise DimensionError("unconditional flow was given a context")
        ctx = np.empty((n, 0))
    else:
        if x is None:
            raise DimensionError(f"flow expects a context of length {model.c}")
        ctx = np.asarray(x, dtype=np.float64)
        if ctx.ndim == 1:
            ctx = ctx[None, :]
        if ctx.shape[1] != model.c:
            raise DimensionError(f"expected context with {model.c} columns, got {ctx.shape}")
        if ctx.shape[0] == 1 and n > 1:
            ctx = np.broadcast_to(ctx, (n, model.c))
        elif ctx.shape[0] != n:
            raise DimensionError(f"{ctx.shape[0]} contexts for {n} targets")
    return y, ctx, single


def _scale_shift(layer: CouplingLayer, net_in: np.ndarray):
    s_raw, cache_s = mlp_forward_cached(layer.scale_net, net_in)
    t, cache_t = mlp_forward_cached(layer.shift_net, net_in)
    th = np.tanh(s_raw / layer.s_max)
    return layer.s_max * th, t, th, cache_s, cache_t


def _eval_scale_shift(layer: CouplingLayer, net_in: np.ndarray):
    s = layer.s_max * np.tanh(mlp_rows(layer.scale_net, net_in) / layer.s_max)
    return s, mlp_rows(layer.shift_net, net_in)


def _forward_batch(model: FlowModel, y: np.ndarray, ctx: np.ndarray):
    log_det = np.zeros(y.shape[0])
    for layer in model.layers:
        net_in = np.concatenate([y[:, layer.pass_idx], ctx], axis=1)
        s, t = _eval_scale_shift(layer, net_in)
        z = y.copy()
        z[:, layer.trans_idx] = y[:, layer.trans_idx] * np.exp(s) + t
        log_det += s.sum(axis=1)
        y = z
    return y, log_det


def _inverse_batch(model: FlowModel, z: np.ndarray, ctx: np.ndarray):
    log_det = np.zeros(z.shape[0])
    for layer in reversed(model.layers):
        net_in = np.concatenate([z[:, layer.pass_idx], ctx], axis=1)
        s, t = _eval_scale_shift(layer, net_in)
        y = z.copy()
        y[:, layer.trans_idx] = (z[:, layer.trans_idx] - t) * np.exp(-s)
        log_det -= s.sum(axis=1)
        z = y
    return z, log_det


def forward(model: FlowModel, y, x=None) -> FlowOutput:
    """``z = h(y, x)`` together with ``log |det dh/dy|``."""
    y, ctx, single = _as_batch(model, y, x)
    z, log_det = _forward_batch(model, y, ctx)
    if single:
        return FlowOutput(z[0], float(log_det[0]))
    return FlowOutput(z, log_det)


def inverse(model: FlowModel, z, x=None) -> tuple[np.ndarray, np.ndarray | float]:
    """``y = h^-1(z, x)`` and the log-det of the inverse map at ``z``."""
    z, ctx, single = _as_batch(model, z, x)
    y, log_det = _inverse_batch(model, z, ctx)
    if single:
        return y[0], float(log_det[0])
    return y, log_det


def log_likelihood(model: FlowModel, y, x=None):
    out = forward(model, y, x)
    return log_gaussian_density(out.z) + out.log_det


def sample(model: FlowModel, n: int, x, rng: Rng) -> np.ndarray:
    z = gaussian_sample(rng, n, model.d)
    y, _ = inverse(model, z, x)
    return y


# ---------------------------------------------------------------------------
# training


def _nll_and_grad(model: FlowModel, grad_layers: list[CouplingLayer],
                  y: np.ndarray, ctx: np.ndarray) -> float:
    """Mean NLL of a batch; gradients land in the buffer behind ``grad_layers``."""
    n = y.shape[0]
    log_det = np.zeros(n)
    tape = []
    for layer in model.layers:
        net_in = np.concatenate([y[:, layer.pass_idx], ctx], axis=1)
        s, t, th, cache_s, cache_t = _scale_shift(layer, net_in)
        exp_s = np.exp(s)
        y_t = y[:, layer.trans_idx]
        z = y.copy()
        z[:, layer.trans_idx] = y_t * exp_s + t
        log_det += s.sum(axis=1)
        tape.append((y_t, exp_s, th, cache_s, cache_t))
        y = z
    nll = 0.5 * model.d * LOG_2PI + 0.5 * np.sum(y * y, axis=1) - log_det
    loss = float(nll.mean())

    gz = y / n
    for layer, glayer, (y_t, exp_s, th, cache_s, cache_t) in zip(
        reversed(model.layers), reversed(grad_layers), reversed(tape)
    ):
        gz_t = gz[:, layer.trans_idx]
        g_s = gz_t * y_t * exp_s - 1.0 / n
        g_s *= 1.0 - th * th
        _, gin_s = mlp_backward_cached(layer.scale_net, cache_s, g_s, glayer.scale_net.arrays())
        _, gin_t = mlp_backward_cached(layer.shift_net, cache_t, gz_t, glayer.shift_net.arrays())
        gy = np.empty_like(gz)
        gy[:, layer.trans_idx] = gz_t * exp_s
        n_pass = layer.pass_idx.size
        gy[:, layer.pass_idx] = gz[:, layer.pass_idx] + gin_s[:, :n_pass] + gin_t[:, :n_pass]
        gz = gy
    return loss


def nll_gradient(model: FlowModel, y, x=None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of a batch and its gradient in ``theta`` order."""
    y, ctx, _ = _as_batch(model, y, x)
    grad = np.zeros_like(model.theta)
    loss = _nll_and_grad(model, model._bind(grad), y, ctx)
    return loss, grad


def mean_nll(model: FlowModel, y, x=None) -> float:
    return float(-np.mean(log_likelihood(model, y, x)))


def train_nll(y, x=None, config: TrainConfig = TrainConfig(), rng: Rng | None = None) -> FlowModel:
    """Maximum-likelihood fit by minibatch Adam.

    ``rng`` drives weight init and batch shuffling; defaults to ``Rng(config.seed)``.
    The returned model carries the per-epoch mean NLL in ``model.history``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] == 0:
        raise ValueError("training set is empty")
    c = 0 if x is None else np.asarray(x).reshape(y.shape[0], -1).shape[1]
    ctx = np.empty((y.shape[0], 0)) if c == 0 else np.asarray(x, dtype=np.float64).reshape(y.shape[0], c)
    rng = rng if rng is not None else Rng(config.seed, stream="train")
    init_rng, shuffle_rng = rng.spawn(0), rng.spawn(1)

    model = FlowModel.create(y.shape[1], c, config.n_layers, config.hidden, init_rng, config.s_max)
    theta = model.theta  # updated in place so the layer views stay live
    grad = np.zeros_like(theta)
    grad_layers = model._bind(grad)
    state = AdamState.zeros_like(theta, lr=config.lr, decay=config.decay)
    history = []
    n = y.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = _nll_and_grad(model, grad_layers, y[idx], ctx[idx])
            if not math.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite training loss at epoch {epoch}")
            try:
                new_theta, state = adam_update(theta, grad, state)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"{exc} (epoch {epoch})") from None
            theta[:] = new_theta
            total += loss * idx.size
        history.append(total / n)
        state = state.end_epoch()
    return model.with_theta(theta, tuple(history))
