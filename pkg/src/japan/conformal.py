"""Split-conformal calibration with log-density conformity scores.

Every variant thresholds a conformity score from below: a candidate ``y`` is
accepted at input ``x`` when its score is at least the calibrated threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from japan import flow as nf
from japan.numcore import log_gaussian_density


class ConfigurationError(ValueError):
    """A variant was asked to run without the models or data it needs."""


class CalibrationError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


ORIGINAL = "original"
UNCONDITIONAL = "unconditional"
CONDITIONAL = "conditional"  # conditional on the base model's prediction
POSTERIOR = "posterior"
LATENT = "latent"
TAU_GLOBAL = "tau_global"
TAU_KNN = "tau_knn"

KINDS = (ORIGINAL, UNCONDITIONAL, CONDITIONAL, POSTERIOR, LATENT, TAU_GLOBAL, TAU_KNN)
NEEDS_BASE = (UNCONDITIONAL, CONDITIONAL, POSTERIOR)


@dataclass(frozen=True)
class Variant:
    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown variant {self.kind!r}")
        if self.kind == TAU_KNN:
            if self.k is None or self.k < 1:
                raise ConfigurationError("tau_knn needs K >= 1")
        elif self.k is not None:
            raise ConfigurationError(f"variant {self.kind} takes no K")

    @classmethod
    def parse(cls, text: str) -> "Variant":
        """``"original"``, ``"latent"``, ``"tau_knn:10"``, ..."""
        kind, _, k = text.partition(":")
        return cls(kind, int(k) if k else None)

    def __str__(self) -> str:
        return f"{self.kind}:{self.k}" if self.kind == TAU_KNN else self.kind

    @property
    def tau_adaptive(self) -> bool:
        return self.kind in (TAU_GLOBAL, TAU_KNN)


# ---------------------------------------------------------------------------
# base predictor


@dataclass(frozen=True)
class BasePredictor:
    coef: np.ndarray  # (c, d)
    intercept: np.ndarray  # (d,)
    lam: float

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.coef.shape[0] == 0:
            n = x.shape[0] if x.ndim == 2 else 1
            return np.tile(self.intercept, (n, 1))
        return x.reshape(-1, self.coef.shape[0]) @ self.coef + self.intercept


def fit_base_predictor(x, y, lam: float = 1e-3) -> BasePredictor:
    """Ridge regression through the normal equations on centred data.

    The intercept is not penalized; with no covariates (c = 0) the predictor
    is the training mean.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    if len(y) == 0:
        raise ValueError("training set is empty")
    if lam < 0:
        raise ValueError("ridge penalty must be >= 0")
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    if x.shape[1] and np.linalg.cond(gram) > 1e12:
        raise NumericalError("normal equations are singular; use a ridge penalty lam > 0")
    coef = np.linalg.solve(gram, xc.T @ yc) if x.shape[1] else np.zeros((0, y.shape[1]))
    return BasePredictor(coef, y_mean - x_mean @ coef, float(lam))


# ---------------------------------------------------------------------------
# calibration


def rank_for(epsilon: float, m: int) -> int:
    """``floor(epsilon * (m + 1))``, robust to representation error in epsilon."""
    return math.floor(round(epsilon * (m + 1), 9))


@dataclass(frozen=True)
class CalibrationResult:
    epsilon: float
    scores: np.ndarray  # sorted ascending
    k: int
    tau: float
    anchor_z: np.ndarray | None = None
    raw_scores: np.ndarray | None = None  # calibration order, tau-adaptive only
    cal_z: np.ndarray | None = None
    cal_x: np.ndarray | None = None
    cal_phi: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.scores.size


def calibrate(scores, epsilon: float) -> CalibrationResult:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise CalibrationError("no calibration scores")
    if not 0.0 < epsilon < 1.0:
        raise CalibrationError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("calibration scores must be finite")
    ordered = np.sort(scores, kind="stable")
    k = rank_for(epsilon, ordered.size)
    tau = float(ordered[k - 1]) if k >= 1 else -math.inf
    return CalibrationResult(float(epsilon), ordered, k, tau)


def p_value(scores, score: float) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise CalibrationError("no calibration scores")
    return (1.0 + np.count_nonzero(scores <= score)) / (scores.size + 1.0)


# ---------------------------------------------------------------------------
# conformity scores


def _require(condition, message):
    if not condition:
        raise ConfigurationError(message)


def conformity_score(variant: Variant, model: nf.FlowModel | None,
                     base: BasePredictor | None, x, y) -> np.ndarray:
    """Per-point conformity score (higher means more conforming).

    For the tau-adaptive variants this is the latent score used during
    calibration; membership uses the full log-likelihood instead.
    """
    _require(model is not None, f"variant {variant} needs a flow model")
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    kind = variant.kind
    if kind in NEEDS_BASE:
        _require(base is not None, f"variant {variant} needs a base predictor")
    if kind == ORIGINAL:
        return nf.log_likelihood(model, y, _ctx(model, x, len(y)))
    if kind == UNCONDITIONAL:
        return nf.log_likelihood(model, y)
    if kind == CONDITIONAL:
        return nf.log_likelihood(model, y, base.predict(_ctx_raw(x, len(y), base)))
    if kind == POSTERIOR:
        y_hat = base.predict(_ctx_raw(x, len(y), base))
        if len(y_hat) == 1:
            y_hat = np.repeat(y_hat, len(y), axis=0)
        return nf.log_likelihood(model, y_hat, y)
    out = nf.forward(model, y, _ctx(model, x, len(y)))
    return log_gaussian_density(out.z)


def _ctx(model: nf.FlowModel, x, n: int):
    if model.c == 0:
        return None
    return np.asarray(x, dtype=np.float64).reshape(-1, model.c)


def _ctx_raw(x, n: int, base: BasePredictor) -> np.ndarray:
    c = base.coef.shape[0]
    if c == 0:
        return np.empty((n, 0))
    return np.asarray(x, dtype=np.float64).reshape(-1, c)


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class PredictionRegion:
    variant: Variant
    model: nf.FlowModel
    calibration: CalibrationResult
    base: BasePredictor | None = None

    @property
    def tau(self) -> float:
        return self.calibration.tau

    @property
    def epsilon(self) -> float:
        return self.calibration.epsilon

    def threshold(self, x=None) -> np.ndarray:
        """Effective threshold per context row (constant unless tau-adaptive)."""
        if self.variant.kind == TAU_GLOBAL:
            return tau_adaptive_threshold(self, x)
        if self.variant.kind == TAU_KNN:
            return knn_threshold(self, x)
        if self.variant.kind in NEEDS_BASE:
            n = 1 if x is None else len(_ctx_raw(x, 1, self.base))
            return np.full(n, self.tau)
        return np.full(_n_contexts(self.model, x), self.tau)

    def score(self, x, y) -> np.ndarray:
        """The quantity compared against :meth:`threshold` for membership."""
        if self.variant.tau_adaptive:
            return nf.log_likelihood(self.model, np.atleast_2d(y), _ctx(self.model, x, 0))
        return conformity_score(self.variant, self.model, self.base, x, y)

    def with_epsilon(self, epsilon: float) -> "PredictionRegion":
        """Recalibrate at another level from the stored calibration scores."""
        cal = self.calibration
        new = calibrate(cal.scores, epsilon)
        if self.variant.tau_adaptive:
            new = replace(new, anchor_z=_anchor(cal.raw_scores, cal.cal_z, new),
                          raw_scores=cal.raw_scores, cal_z=cal.cal_z,
                          cal_x=cal.cal_x, cal_phi=cal.cal_phi)
        return replace(self, calibration=new)


def _anchor(raw_scores, cal_z, cal: CalibrationResult):
    if cal.k == 0:
        return None
    # smallest calibration index among points attaining the k-th smallest score
    return cal_z[np.flatnonzero(raw_scores == cal.tau)[0]].copy()


def calibrate_region(variant: Variant, model: nf.FlowModel, x_cal, y_cal, epsilon: float,
                     base: BasePredictor | None = None) -> PredictionRegion:
    """Score the calibration split and fix the threshold (and anchor, for tau variants)."""
    y_cal = np.atleast_2d(np.asarray(y_cal, dtype=np.float64))
    scores = conformity_score(variant, model, base, x_cal, y_cal)
    cal = calibrate(scores, epsilon)
    if variant.tau_adaptive:
        ctx = _ctx(model, x_cal, len(y_cal))
        out = nf.forward(model, y_cal, ctx)
        if variant.kind == TAU_KNN and variant.k > cal.m:
            raise ConfigurationError(f"K={variant.k} exceeds the calibration size {cal.m}")
        cal_x = np.empty((len(y_cal), 0)) if ctx is None else np.array(ctx)
        cal = replace(cal, anchor_z=_anchor(scores, out.z, cal), raw_scores=np.array(scores),
                      cal_z=np.array(out.z), cal_x=cal_x, cal_phi=np.asarray(out.log_det))
    return PredictionRegion(variant, model, cal, base)


def tau_adaptive_threshold(region: PredictionRegion, x=None) -> np.ndarray:
    """``tau_latent + log|det dh/dy|`` at the anchor latent pulled back under ``x``."""
    cal = region.calibration
    if region.variant.kind != TAU_GLOBAL:
        raise ConfigurationError("tau_adaptive_threshold needs the tau_global variant")
    if cal.k == 0:
        return np.full(_n_contexts(region.model, x), -math.inf)
    if cal.anchor_z is None:
        raise CalibrationError("region has no stored anchor latent")
    n = _n_contexts(region.model, x)
    z = np.broadcast_to(cal.anchor_z, (n, region.model.d))
    _, log_det_inv = nf.inverse(region.model, z, _ctx(region.model, x, n))
    return cal.tau - np.atleast_1d(log_det_inv)


def knn_threshold(region: PredictionRegion, x=None) -> np.ndarray:
    """``tau_latent`` plus the mean stored log-det over the K nearest calibration inputs."""
    cal, variant = region.calibration, region.variant
    if variant.kind != TAU_KNN:
        raise ConfigurationError("knn_threshold needs the tau_knn variant")
    if variant.k > cal.m:
        raise ConfigurationError(f"K={variant.k} exceeds the calibration size {cal.m}")
    n = _n_contexts(region.model, x)
    if cal.k == 0:
        return np.full(n, -math.inf)
    if region.model.c == 0:
        nearest = np.tile(np.arange(variant.k), (n, 1))
        return cal.tau + cal.cal_phi[nearest].mean(axis=1)
    xq = np.asarray(x, dtype=np.float64).reshape(-1, region.model.c)
    out = np.empty(len(xq))
    for start in range(0, len(xq), 512):
        block = xq[start:start + 512]
        dist = ((block[:, None, :] - cal.cal_x[None, :, :]) ** 2).sum(axis=2)
        # stable sort keeps calibration order among equidistant neighbours
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :variant.k]
        out[start:start + 512] = cal.cal_phi[nearest].mean(axis=1)
    return cal.tau + out


def _n_contexts(model: nf.FlowModel, x) -> int:
    if x is None or model.c == 0:
        return 1
    return len(np.asarray(x, dtype=np.float64).reshape(-1, model.c))


def contains(region: PredictionRegion, x, y) -> np.ndarray | bool:
    """Membership ``score(x, y) >= threshold(x)``; vectorized over rows of ``y``."""
    y_arr = np.asarray(y, dtype=np.float64)
    single = y_arr.ndim == 1
    y_arr = np.atleast_2d(y_arr)
    if region.tau == -math.inf and not region.variant.tau_adaptive:
        result = np.ones(len(y_arr), dtype=bool)
    else:
        scores = region.score(x, y_arr)
        thr = region.threshold(x) if region.variant.tau_adaptive else region.tau
        result = scores >= thr
    return bool(result[0]) if single else result


# ---------------------------------------------------------------------------
# model fitting per variant


def fit_models(variant: Variant, x_train, y_train, config: nf.TrainConfig = nf.TrainConfig(),
               lam: float = 1e-3, rng=None) -> tuple[nf.FlowModel, BasePredictor | None]:
    """Train the flow (and base predictor) a variant needs, on the train split only."""
    y_train = np.atleast_2d(np.asarray(y_train, dtype=np.float64))
    x_train = np.asarray(x_train, dtype=np.float64).reshape(len(y_train), -1)
    c = x_train.shape[1]
    kind = variant.kind
    if kind in (UNCONDITIONAL, POSTERIOR) and c == 0:
        raise ConfigurationError(f"variant {variant} needs covariates; the dataset has none")
    base = fit_base_predictor(x_train, y_train, lam) if kind in NEEDS_BASE else None
    if kind == UNCONDITIONAL:
        model = nf.train_nll(base.predict(x_train), None, config, rng)
    elif kind == CONDITIONAL:
        model = nf.train_nll(y_train, base.predict(x_train), config, rng)
    elif kind == POSTERIOR:
        model = nf.train_nll(base.predict(x_train), y_train, config, rng)
    else:
        model = nf.train_nll(y_train, x_train if c else None, config, rng)
    return model, base
