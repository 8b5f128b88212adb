"""Small dense-numerics toolkit: seeded PRNG, a two-hidden-layer ReLU MLP with
hand-written reverse-mode gradients, and Adam with per-epoch learning-rate decay.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

_MASK64 = 0xFFFFFFFFFFFFFFFF
_XORSHIFT_MULT = np.uint64(0x2545F4914F6CDD1D)


class DimensionError(ValueError):
    """Raised when array shapes do not chain."""


class TrainingDivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


# ---------------------------------------------------------------------------
# random number generation


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic xorshift64* generator.

    The state is a bank of ``LANES`` independent xorshift64* registers seeded
    through splitmix64; every draw advances all lanes at once and emits their
    outputs lane by lane. Requests are served from a buffer, so the stream of
    values depends only on the seed, never on how requests are chunked.

    ``stream`` names an independent stream for the same seed; consumers that
    share a run seed (splitting, generation, init, ...) must use distinct names.
    """

    LANES = 1024

    def __init__(self, seed: int, stream: str = ""):
        seed = int(seed) & _MASK64
        states = []
        s = seed
        if stream:
            s = _splitmix64(s ^ (zlib.crc32(stream.encode("utf-8")) << 32))
        self._key = s
        for _ in range(self.LANES):
            s = _splitmix64(s)
            states.append(s or 0x9E3779B97F4A7C15)
        self.seed = seed
        self._state = np.array(states, dtype=np.uint64)
        self._buffer = np.empty(0, dtype=np.uint64)
        self._spare = np.empty(0)

    def _advance(self) -> np.ndarray:
        s = self._state
        s ^= s >> np.uint64(12)
        s ^= s << np.uint64(25)
        s ^= s >> np.uint64(27)
        return s * _XORSHIFT_MULT

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        chunks = [self._buffer]
        have = self._buffer.size
        while have < n:
            block = self._advance()
            chunks.append(block)
            have += block.size
        out = np.concatenate(chunks) if len(chunks) > 1 else self._buffer
        self._buffer = out[n:].copy()
        return out[:n].copy()

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles on [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard-normal draws via the basic Box-Muller transform.

        Each pair of consecutive uniforms yields two normals; an unused second
        normal is kept for the next call, so chunking never changes the stream.
        """
        n = int(n)
        spare, self._spare = self._spare, np.empty(0)
        need = n - spare.size
        if need <= 0:
            self._spare = spare[n:]
            return spare[:n].copy()
        half = (need + 1) // 2
        u = self.uniform(2 * half)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))  # 1 - u in (0, 1] keeps the log finite
        theta = 2.0 * np.pi * u[1::2]
        fresh = np.empty(2 * half)
        fresh[0::2] = r * np.cos(theta)
        fresh[1::2] = r * np.sin(theta)
        self._spare = fresh[need:]
        return np.concatenate([spare, fresh[:need]])

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self, offset: int) -> "Rng":
        """Independent generator for a derived stream."""
        return Rng(_splitmix64((self._key + 0x632BE59BD9B4E019 * (offset + 1)) & _MASK64))


def gaussian_sample(rng: Rng, n: int, d: int) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError(f"need n, d >= 1, got n={n}, d={d}")
    return rng.normal(n * d).reshape(n, d)


def log_gaussian_density(z) -> float | np.ndarray:
    """Log density of the standard normal; rows of a matrix are separate points."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * d * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    """input -> hidden -> hidden -> output, ReLU on the hidden layers.

    Weights are stored (fan_in, fan_out) so a forward pass is ``x @ W + b``.
    The arrays may be views into a larger flat buffer owned by a model.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @staticmethod
    def shapes(n_in: int, hidden: int, n_out: int) -> list[tuple[int, ...]]:
        dims = [n_in, hidden, hidden, n_out]
        out: list[tuple[int, ...]] = []
        for a, b in zip(dims[:-1], dims[1:]):
            out += [(a, b), (b,)]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "MlpParams":
        return cls(weights=list(arrays[0::2]), biases=list(arrays[1::2]))

    def check(self) -> None:
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError("bias length must equal weight fan_out")
        for w_prev, w in zip(self.weights[:-1], self.weights[1:]):
            if w_prev.shape[1] != w.shape[0]:
                raise DimensionError(f"layer shapes do not chain: {w_prev.shape} -> {w.shape}")


def init_mlp(n_in: int, hidden: int, n_out: int, rng: Rng | None) -> MlpParams:
    """Glorot-uniform weights and zero biases; ``rng=None`` gives all zeros."""
    arrays = []
    for shape in MlpParams.shapes(n_in, hidden, n_out):
        if len(shape) == 2 and rng is not None:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append((2.0 * rng.uniform(shape[0] * shape[1]) - 1.0).reshape(shape) * limit)
        else:
            arrays.append(np.zeros(shape))
    return MlpParams.from_arrays(arrays)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise DimensionError(f"expected input with {params.n_in} columns, got shape {x.shape}")
    return x


def mlp_forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    (w1, w2, w3), (b1, b2, b3) = params.weights, params.biases
    a1 = x @ w1
    a1 += b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ w2
    a2 += b2
    h2 = np.maximum(a2, 0.0)
    out = h2 @ w3
    out += b3
    return out, (x, a1, h1, a2, h2)


def mlp_rows(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass whose result for a row does not depend on the other rows.

    BLAS picks different kernels (and summation orders) for different batch
    shapes; einsum's fixed per-element loop keeps scores bit-stable whether a
    point is evaluated alone or inside a batch.
    """
    (w1, w2, w3), (b1, b2, b3) = params.weights, params.biases
    h = np.maximum(np.einsum("ni,ij->nj", x, w1) + b1, 0.0)
    h = np.maximum(np.einsum("ni,ij->nj", h, w2) + b2, 0.0)
    return np.einsum("ni,ij->nj", h, w3) + b3


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_rows(params, _check_input(params, x))


def mlp_backward_cached(
    params: MlpParams, cache: tuple, out_grad: np.ndarray, grads: list[np.ndarray] | None = None
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backward pass reusing a forward cache.

    When ``grads`` is given, parameter gradients are written into those arrays
    (same order as :meth:`MlpParams.arrays`) instead of freshly allocated ones.
    """
    x, a1, h1, a2, h2 = cache
    w1, w2, w3 = params.weights
    if grads is None:
        grads = [np.empty(a.shape) for a in params.arrays()]
    gw1, gb1, gw2, gb2, gw3, gb3 = grads
    np.matmul(h2.T, out_grad, out=gw3)
    np.sum(out_grad, axis=0, out=gb3)
    g = out_grad @ w3.T
    g *= a2 > 0.0
    np.matmul(h1.T, g, out=gw2)
    np.sum(g, axis=0, out=gb2)
    g = g @ w2.T
    g *= a1 > 0.0
    np.matmul(x.T, g, out=gw1)
    np.sum(g, axis=0, out=gb1)
    return grads, g @ w1.T


def mlp_backward(
    params: MlpParams, x: np.ndarray, out_grad: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(mlp_forward(params, x) * out_grad)``.

    Returns the parameter gradients (packed as an :class:`MlpParams`) and the
    gradient with respect to ``x``.
    """
    x = _check_input(params, x)
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if out_grad.shape != (x.shape[0], params.n_out):
        raise DimensionError(
            f"output_grad shape {out_grad.shape} != ({x.shape[0]}, {params.n_out})"
        )
    _, cache = mlp_forward_cached(params, x)
    grads, x_grad = mlp_backward_cached(params, cache, out_grad)
    return MlpParams.from_arrays(grads), x_grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.999
    t: int = 0
    epoch: int = field(default=0)

    @classmethod
    def zeros_like(cls, params: np.ndarray, lr: float = 1e-3, decay: float = 0.999) -> "AdamState":
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), lr=lr, decay=decay)

    def end_epoch(self) -> "AdamState":
        """Exponential decay, applied once per epoch."""
        return AdamState(self.m, self.v, self.lr * self.decay, self.beta1, self.beta2,
                         self.eps, self.decay, self.t, self.epoch + 1)


def adam_update(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergenceError(f"non-finite gradient at step {state.t + 1}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, state.lr, state.beta1, state.beta2, state.eps,
                          state.decay, t, state.epoch)
    return new_params, new_state
