"""Geometric conformal baselines around a point predictor.

Both regions reuse :func:`japan.conformal.calibrate` with the negated
residual size as the conformity score, so the threshold rank matches the
flow regions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from japan.conformal import BasePredictor, CalibrationError, calibrate


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def _residuals(base: BasePredictor, x, y) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if len(y) == 0:
        raise CalibrationError("calibration set is empty")
    return y - base.predict(np.asarray(x, dtype=np.float64).reshape(len(y), -1))


@dataclass(frozen=True)
class RectRegion:
    base: BasePredictor
    half_widths: np.ndarray
    level: float  # per-dimension significance, epsilon / d

    def contains(self, x, y) -> np.ndarray:
        res = _residuals(self.base, x, y)
        return np.all(np.abs(res) <= self.half_widths, axis=1)

    @property
    def area(self) -> float:
        return float(np.prod(2.0 * self.half_widths))


def fit_rect(base: BasePredictor, x_cal, y_cal, epsilon: float) -> RectRegion:
    """Bonferroni box: each coordinate gets a split-conformal interval at epsilon / d."""
    res = _residuals(base, x_cal, y_cal)
    level = epsilon / res.shape[1]
    widths = np.array([-calibrate(-np.abs(res[:, j]), level).tau for j in range(res.shape[1])])
    return RectRegion(base, widths, level)


@dataclass(frozen=True)
class EllipseRegion:
    base: BasePredictor
    cov: np.ndarray
    radius: float

    def mahalanobis(self, x, y) -> np.ndarray:
        res = _residuals(self.base, x, y)
        sol = np.linalg.solve(self.cov, res.T).T
        return np.sqrt(np.sum(res * sol, axis=1))

    def contains(self, x, y) -> np.ndarray:
        return self.mahalanobis(x, y) <= self.radius

    @property
    def area(self) -> float:
        d = self.cov.shape[0]
        return unit_ball_volume(d) * math.sqrt(np.linalg.det(self.cov)) * self.radius**d


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _well_conditioned(cov: np.ndarray) -> bool:
    eig = np.linalg.eigvalsh(cov)
    return bool(eig[0] > 1e-12 * max(eig[-1], 1e-300))


def residual_covariance(res: np.ndarray, jitter: float = 1e-6) -> np.ndarray:
    """Sample covariance of residuals; adds ``jitter * I`` when it is (near) singular."""
    if len(res) < res.shape[1] + 1:
        raise ValueError(f"need at least d + 1 = {res.shape[1] + 1} residuals for a covariance")
    cov = np.atleast_2d(np.cov(res, rowvar=False))
    if _well_conditioned(cov):
        return cov
    cov = cov + jitter * np.eye(cov.shape[0])
    if not _well_conditioned(cov):
        raise SingularCovarianceError("residual covariance is singular even after jitter")
    return cov


def fit_ellipse(base: BasePredictor, x_train, y_train, x_cal, y_cal, epsilon: float,
                cov: np.ndarray | None = None) -> EllipseRegion:
    """Mahalanobis ellipsoid: shape from train residuals, radius from calibration.

    Pass ``cov`` to reuse a fixed shape instead of refitting it.
    """
    if cov is None:
        cov = residual_covariance(_residuals(base, x_train, y_train))
    probe = EllipseRegion(base, cov, 0.0)
    dist = probe.mahalanobis(x_cal, y_cal)
    return EllipseRegion(base, cov, -calibrate(-dist, epsilon).tau)
