"""Region size: latent-space Monte Carlo, a brute-force 2D grid, and coverage."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from japan import conformal as cp
from japan import flow as nf
from japan.numcore import Rng, gaussian_sample, log_gaussian_density

LOG_WEIGHT_CAP = 50.0
CHUNK = 1 << 16
MAX_MC_DIM = 8


class AreaEstimationError(ArithmeticError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class AreaEstimate:
    value: float
    se: float
    n: int
    n_capped: int = 0


def _indicator(log_pz, log_det_inv, tau, latent: bool):
    if latent:
        return log_pz >= tau
    return log_pz - log_det_inv >= tau


def mc_area(model: nf.FlowModel, x, tau: float, n: int, rng: Rng,
            latent: bool = False) -> AreaEstimate:
    """Volume of ``{y : log p(y|x) >= tau}`` by sampling the base density.

    Each draw ``z`` is pushed through the inverse flow; its importance weight
    ``1 / p(y|x)`` is ``exp(log_det_inv - log p_Z(z))`` so no forward pass is
    needed.  With ``latent=True`` the indicator tests ``log p_Z(z) >= tau``
    instead (the latent-ball region).  Log-weights are capped at 50.
    """
    if n < 1:
        raise ValueError("need at least one Monte Carlo sample")
    if tau == math.inf:
        return AreaEstimate(0.0, 0.0, n)
    if tau == -math.inf:
        return AreaEstimate(math.inf, 0.0, n)
    if model.d > MAX_MC_DIM:
        warnings.warn(f"importance weights degrade above d={MAX_MC_DIM}", stacklevel=2)
    total = total_sq = 0.0
    capped = 0
    done = 0
    while done < n:
        size = min(CHUNK, n - done)
        z = gaussian_sample(rng, size, model.d)
        _, log_det_inv = nf.inverse(model, z, x)
        log_pz = log_gaussian_density(z)
        log_w = log_det_inv - log_pz
        bad = ~np.isfinite(log_w)
        if bad.any():
            raise AreaEstimationError(f"non-finite importance weight at z={z[np.argmax(bad)]}")
        capped += int(np.count_nonzero(log_w > LOG_WEIGHT_CAP))
        w = np.exp(np.minimum(log_w, LOG_WEIGHT_CAP))
        w *= _indicator(log_pz, log_det_inv, tau, latent)
        total += float(w.sum())
        total_sq += float((w * w).sum())
        done += size
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1) if n > 1 else 0.0
    return AreaEstimate(mean, math.sqrt(var / n), n, capped)


def mc_area_contexts(model: nf.FlowModel, contexts: np.ndarray, taus, n_per: int, rng: Rng,
                     latent: bool = False, block: int = 64) -> AreaEstimate:
    """Mean over contexts of per-context areas, each with ``n_per`` draws.

    Contexts are processed in fixed blocks of rows, so results do not depend
    on how work might be spread over threads.
    """
    contexts = np.asarray(contexts, dtype=np.float64).reshape(-1, model.c)
    taus = np.broadcast_to(np.asarray(taus, dtype=np.float64), (len(contexts),))
    if np.any(taus == -math.inf):
        return AreaEstimate(math.inf, 0.0, n_per * len(contexts))
    areas = np.empty(len(contexts))
    ses = np.empty(len(contexts))
    capped = 0
    for start in range(0, len(contexts), block):
        ctx = contexts[start:start + block]
        b = len(ctx)
        z = gaussian_sample(rng, b * n_per, model.d)
        rep = np.repeat(ctx, n_per, axis=0)
        _, log_det_inv = nf.inverse(model, z, rep)
        log_pz = log_gaussian_density(z)
        log_w = log_det_inv - log_pz
        bad = ~np.isfinite(log_w)
        if bad.any():
            raise AreaEstimationError(f"non-finite importance weight at z={z[np.argmax(bad)]}")
        capped += int(np.count_nonzero(log_w > LOG_WEIGHT_CAP))
        w = np.exp(np.minimum(log_w, LOG_WEIGHT_CAP))
        w *= _indicator(log_pz, log_det_inv, np.repeat(taus[start:start + b], n_per), latent)
        w = w.reshape(b, n_per)
        areas[start:start + b] = w.mean(axis=1)
        ses[start:start + b] = w.std(axis=1, ddof=1) / math.sqrt(n_per) if n_per > 1 else 0.0
    se = math.sqrt(float(np.sum(ses**2))) / len(contexts)
    return AreaEstimate(float(areas.mean()), se, n_per * len(contexts), capped)


# ---------------------------------------------------------------------------
# grid oracle


@dataclass(frozen=True)
class Grid2D:
    lower: tuple[float, float]
    upper: tuple[float, float]
    resolution: tuple[int, int] = (1000, 1000)

    def __post_init__(self):
        if min(self.resolution) < 100:
            raise ValueError("grid resolution must be at least 100 per axis")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("grid upper bounds must exceed lower bounds")

    @property
    def steps(self) -> tuple[float, float]:
        return tuple((hi - lo) / r for lo, hi, r in zip(self.lower, self.upper, self.resolution))

    @property
    def cell_area(self) -> float:
        hx, hy = self.steps
        return hx * hy

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(lo + (np.arange(r) + 0.5) * h
                     for lo, r, h in zip(self.lower, self.resolution, self.steps))

    def points(self) -> np.ndarray:
        gx, gy = self.axes()
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @classmethod
    def covering(cls, data, pad_std: float = 4.0, resolution: int = 1000) -> "Grid2D":
        """Box containing the data and its mean +/- ``pad_std`` standard deviations."""
        data = np.asarray(data, dtype=np.float64)
        mean, std = data.mean(axis=0), data.std(axis=0)
        lo = np.minimum(data.min(axis=0), mean - pad_std * std)
        hi = np.maximum(data.max(axis=0), mean + pad_std * std)
        return cls(tuple(lo), tuple(hi), (resolution, resolution))


def grid_area_2d(log_density, grid: Grid2D, tau: float, dim: int = 2, chunk: int = 1 << 18) -> float:
    """Cell area times the number of cell centres with log-density >= tau."""
    if dim != 2:
        raise UnsupportedDimensionError(f"grid oracle only supports d = 2, got d = {dim}")
    pts = grid.points()
    count = 0
    for start in range(0, len(pts), chunk):
        count += int(np.count_nonzero(log_density(pts[start:start + chunk]) >= tau))
    return grid.cell_area * count


def flow_grid_area(model: nf.FlowModel, x, tau: float, grid: Grid2D) -> float:
    return grid_area_2d(lambda y: nf.log_likelihood(model, y, x), grid, tau, dim=model.d)


def region_grid_area(region: cp.PredictionRegion, x, grid: Grid2D) -> float:
    """Grid area of one context's region, for any variant with d = 2 targets."""
    if region.model.d != 2 and region.variant.kind != cp.POSTERIOR:
        raise UnsupportedDimensionError("grid oracle only supports d = 2")
    thr = float(np.asarray(region.threshold(x)).ravel()[0])
    return grid_area_2d(lambda y: region.score(x, y), grid, thr)


# ---------------------------------------------------------------------------
# coverage


def coverage(region, x_test, y_test) -> float:
    """Fraction of test pairs inside the region (works for baselines too)."""
    y_test = np.atleast_2d(np.asarray(y_test, dtype=np.float64))
    if len(y_test) == 0:
        raise ValueError("test set is empty")
    inside = region.contains(x_test, y_test) if hasattr(region, "contains") \
        else cp.contains(region, x_test, y_test)
    return float(np.mean(inside))


def region_area(region: cp.PredictionRegion, x_contexts, n_per: int, rng: Rng,
                n_global: int = 100_000) -> AreaEstimate:
    """Dataset-level area of a calibrated flow region.

    Context-free regions use one estimate with ``n_global`` draws; conditional
    ones average per-context estimates with ``n_per`` draws each.
    """
    kind = region.variant.kind
    latent = kind == cp.LATENT
    model = region.model
    if kind == cp.POSTERIOR:
        raise UnsupportedDimensionError("posterior regions are measured with the grid oracle")
    if kind == cp.UNCONDITIONAL or model.c == 0:
        thr = float(np.asarray(region.threshold(None)).ravel()[0])
        return mc_area(model, None, thr, n_global, rng, latent=latent)
    contexts = np.asarray(x_contexts, dtype=np.float64)
    if kind == cp.CONDITIONAL:
        contexts = region.base.predict(contexts)
    thr = region.threshold(np.asarray(x_contexts)) if region.variant.tau_adaptive else region.tau
    return mc_area_contexts(model, contexts, thr, n_per, rng, latent=latent)
