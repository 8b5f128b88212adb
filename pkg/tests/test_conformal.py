import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from japan import conformal as cp
from japan import data as dt
from japan import flow as nf
from japan.numcore import Rng, log_gaussian_density
from tests.conftest import random_model

ALL_VARIANTS = ["original", "unconditional", "conditional", "posterior", "latent",
                "tau_global", "tau_knn:10"]


def _variant_model(variant, seed=0):
    """Untrained flow of the shape a variant needs on (c=1, d=2) data."""
    kind = cp.Variant.parse(variant).kind
    c = {cp.UNCONDITIONAL: 0, cp.CONDITIONAL: 2, cp.POSTERIOR: 2}.get(kind, 1)
    return random_model(2, c, seed=seed, hidden=8)


class TestCalibrate:
    def test_order_statistic(self):
        cal = cp.calibrate([0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6], 0.2)
        assert cal.k == 2 and cal.tau == 0.2

    def test_small_sample_safeguard(self):
        cal = cp.calibrate(np.arange(9.0), 0.05)
        assert cal.k == 0 and cal.tau == -math.inf

    def test_rank_robust_to_representation(self):
        # 0.29 * 100 evaluates to 28.999999999999996
        assert 0.29 * 100 < 29
        assert cp.rank_for(0.29, 99) == 29 and cp.rank_for(0.1, 9) == 1 and cp.rank_for(0.7, 99) == 70

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
    def test_epsilon_range(self, bad):
        with pytest.raises(cp.CalibrationError):
            cp.calibrate([1.0, 2.0], bad)

    def test_empty_and_non_finite(self):
        with pytest.raises(cp.CalibrationError):
            cp.calibrate([], 0.1)
        with pytest.raises(cp.CalibrationError):
            cp.calibrate([1.0, np.nan], 0.1)

    def test_exchangeability_uniform(self):
        trials, m, eps = 10_000, 199, 0.1
        u = Rng(0, "exch").uniform(trials * (m + 1)).reshape(trials, m + 1)
        k = cp.rank_for(eps, m)
        tau = np.sort(u[:, :m], axis=1)[:, k - 1]
        cov = np.mean(u[:, m] >= tau)
        se = math.sqrt(eps * (1 - eps) / trials)
        assert cov >= 1 - eps - 3 * se
        assert abs(cov - (1 - k / (m + 1))) <= 3 * se

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60),
           st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_nesting(self, scores, e1, e2):
        lo, hi = sorted((e1, e2))
        assert cp.calibrate(scores, lo).tau <= cp.calibrate(scores, hi).tau


class TestPValue:
    def test_examples(self):
        s = [1.0, 2.0, 3.0]
        assert cp.p_value(s, 10.0) == 1.0
        assert cp.p_value(s, 0.0) == 0.25
        assert cp.p_value(s, 2.0) == 0.75

    @given(st.lists(st.integers(-20, 20), min_size=1, max_size=40), st.integers(-25, 25),
           st.integers(1, 99))
    def test_membership_iff_p_value(self, scores, a, pct):
        scores = [float(v) for v in scores]
        cal = cp.calibrate(scores, pct / 100)
        p = cp.p_value(scores, float(a))
        m = len(scores)
        assert p in {(j + 1) / (m + 1) for j in range(m + 1)}
        assert (a >= cal.tau) == (p > cal.k / (m + 1))


class TestScores:
    def test_original_zero_init(self):
        model = nf.FlowModel.create(2, rng=None)
        s = cp.conformity_score(cp.Variant(cp.ORIGINAL), model, None, None, np.zeros(2))
        assert s[0] == pytest.approx(-1.8378770664, abs=1e-9)

    def test_latent_at_zero_latent(self):
        model = random_model(2, c=1, seed=2)
        x = np.array([0.4])
        y, _ = nf.inverse(model, np.zeros(2), x)
        s = cp.conformity_score(cp.Variant(cp.LATENT), model, None, x, y)
        assert s[0] == pytest.approx(-1.8378770664, abs=1e-9)

    def test_original_equals_latent_when_volume_preserving(self):
        model = nf.FlowModel.create(2, c=1, rng=None)
        y, x = Rng(0).normal(20).reshape(10, 2), Rng(1).normal(10).reshape(10, 1)
        a = cp.conformity_score(cp.Variant(cp.ORIGINAL), model, None, x, y)
        b = cp.conformity_score(cp.Variant(cp.LATENT), model, None, x, y)
        assert np.array_equal(a, b)

    def test_base_required(self):
        with pytest.raises(cp.ConfigurationError):
            cp.conformity_score(cp.Variant(cp.CONDITIONAL), random_model(2, 2), None,
                                np.zeros((1, 1)), np.zeros(2))

    def test_variant_parse(self):
        assert cp.Variant.parse("tau_knn:7") == cp.Variant(cp.TAU_KNN, 7)
        assert str(cp.Variant.parse("tau_knn:7")) == "tau_knn:7"
        with pytest.raises(cp.ConfigurationError):
            cp.Variant.parse("tau_knn:0")
        with pytest.raises(cp.ConfigurationError):
            cp.Variant.parse("orignal")


class TestContains:
    def test_infinite_threshold_accepts_everything(self):
        model = random_model(2, seed=1)
        region = cp.calibrate_region(cp.Variant(cp.ORIGINAL), model, None, Rng(0).normal(18).reshape(9, 2), 0.05)
        assert region.tau == -math.inf
        assert np.all(cp.contains(region, None, 1e3 * Rng(1).normal(20).reshape(10, 2)))

    def test_boundary_is_inclusive(self):
        model = random_model(2, c=1, seed=1)
        y, x = Rng(0).normal(40).reshape(20, 2), Rng(1).normal(20).reshape(20, 1)
        region = cp.calibrate_region(cp.Variant(cp.ORIGINAL), model, x, y, 0.2)
        j = int(np.argmin(np.abs(region.score(x, y) - region.tau)))
        assert region.score(x[j], y[j])[0] == region.tau
        assert cp.contains(region, x[j], y[j]) is True

    def test_single_and_batch_agree(self, rng):
        model = random_model(2, c=1, seed=2)
        y, x = rng.normal(60).reshape(30, 2), rng.normal(30).reshape(30, 1)
        region = cp.calibrate_region(cp.Variant(cp.ORIGINAL), model, x, y, 0.3)
        batch = cp.contains(region, x, y)
        assert list(batch) == [cp.contains(region, x[i], y[i]) for i in range(30)]

    def test_nesting_pointwise(self, rng):
        model = random_model(2, c=1, seed=5)
        y, x = rng.normal(400).reshape(200, 2), rng.normal(200).reshape(200, 1)
        region = cp.calibrate_region(cp.Variant(cp.ORIGINAL), model, x[:100], y[:100], 0.05)
        prev = None
        for eps in (0.05, 0.1, 0.2, 0.5, 0.9):
            inside = cp.contains(region.with_epsilon(eps), x[100:], y[100:])
            if prev is not None:
                assert np.all(prev >= inside)
            prev = inside

    def test_moons_single_seed_coverage(self, moons):
        ds, model = moons
        region = cp.calibrate_region(cp.Variant(cp.ORIGINAL), model, *ds.part("cal"), 0.1)
        x_te, y_te = ds.part("test")
        cov = np.mean(cp.contains(region, x_te, y_te))
        # one split: binomial noise of the test set plus that of the calibration quantile
        sd = math.sqrt(0.09 / len(y_te) + 0.09 / region.calibration.m)
        assert abs(cov - 0.9) <= 3 * sd


TRIALS, M, EPS = 1000, 99, 0.1


@pytest.fixture(scope="module")
def pool():
    ds = dt.generate_conditional(TRIALS * (M + 1) + 500, seed=11)
    base = cp.fit_base_predictor(ds.x[:500], ds.y[:500])
    return base, ds.x[500:], ds.y[500:]


class TestMarginalCoverage:
    """Fresh calibration set and test point per trial; any model, any variant."""

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_coverage(self, variant, pool):
        base, x, y = pool
        v = cp.Variant.parse(variant)
        model = _variant_model(variant)
        hits = 0
        step = M + 1
        for t in range(TRIALS):
            cal = slice(t * step, t * step + M)
            j = t * step + M
            region = cp.calibrate_region(v, model, x[cal], y[cal], EPS, base)
            hits += bool(cp.contains(region, x[j], y[j]))
        cov = hits / TRIALS
        assert cov >= 1 - EPS - 3 * math.sqrt(EPS * (1 - EPS) / TRIALS)


class TestMonotoneInvariance:
    @pytest.mark.parametrize("g", [lambda a: 2 * a + 1, np.exp], ids=["affine", "exp"])
    def test_membership_unchanged(self, g):
        model = random_model(2, c=1, seed=8)
        rng = Rng(8, "pts")
        x_cal, y_cal = rng.uniform(200).reshape(200, 1), rng.normal(400).reshape(200, 2)
        x_q, y_q = rng.uniform(2000).reshape(2000, 1), 1.5 * rng.normal(4000).reshape(2000, 2)
        v = cp.Variant(cp.ORIGINAL)
        cal_s = cp.conformity_score(v, model, None, x_cal, y_cal)
        q_s = cp.conformity_score(v, model, None, x_q, y_q)
        for eps in (0.05, 0.1, 0.2):
            plain = q_s >= cp.calibrate(cal_s, eps).tau
            moved = g(q_s) >= cp.calibrate(g(cal_s), eps).tau
            assert np.array_equal(plain, moved)


class TestLatentIsNormBall:
    def test_grid_membership(self):
        model = random_model(2, c=1, seed=12)
        rng = Rng(12, "cal")
        x_cal, y_cal = rng.uniform(300).reshape(300, 1), rng.normal(600).reshape(300, 2)
        region = cp.calibrate_region(cp.Variant(cp.LATENT), model, x_cal, y_cal, 0.1)
        zc = nf.forward(model, y_cal, x_cal).z
        radius_sq = -cp.calibrate(-np.sum(zc * zc, axis=1), 0.1).tau
        g = np.linspace(-3, 3, 200)
        yy = np.column_stack([a.ravel() for a in np.meshgrid(g, g)])
        x = np.array([[0.25]])
        z = nf.forward(model, yy, x).z
        ball = np.sum(z * z, axis=1) <= radius_sq
        assert np.array_equal(cp.contains(region, x, yy), ball)
        assert 0 < ball.sum() < len(yy)


class TestTauAdaptive:
    def test_unconditional_constant(self):
        model = random_model(2, seed=4)
        y = Rng(4).normal(200).reshape(100, 2)
        region = cp.calibrate_region(cp.Variant(cp.TAU_GLOBAL), model, None, y, 0.1)
        thr = region.threshold(None)
        assert thr.shape == (1,) and np.isfinite(thr[0])

    def test_zero_init_threshold_is_latent_tau(self):
        model = nf.FlowModel.create(2, c=1, rng=None)
        y, x = Rng(1).normal(200).reshape(100, 2), Rng(2).uniform(100).reshape(100, 1)
        region = cp.calibrate_region(cp.Variant(cp.TAU_GLOBAL), model, x, y, 0.1)
        assert np.all(region.threshold(x) == region.tau)

    def test_anchor_scores_at_tau(self):
        model = random_model(2, c=1, seed=3)
        y, x = Rng(1).normal(200).reshape(100, 2), Rng(2).uniform(100).reshape(100, 1)
        region = cp.calibrate_region(cp.Variant(cp.TAU_GLOBAL), model, x, y, 0.1)
        assert log_gaussian_density(region.calibration.anchor_z) == region.tau

    def test_wider_noise_context_gets_lower_threshold(self, conditional):
        ds, model = conditional
        region = cp.calibrate_region(cp.Variant(cp.TAU_GLOBAL), model, *ds.part("cal"), 0.1)
        x_lo, x_hi = ds.standardize_x(np.array([[-0.8]])), ds.standardize_x(np.array([[0.8]]))
        assert region.threshold(x_hi)[0] < region.threshold(x_lo)[0]

    def test_knn_all_neighbours(self):
        model = random_model(2, c=1, seed=6)
        y, x = Rng(1).normal(60).reshape(30, 2), Rng(2).uniform(30).reshape(30, 1)
        region = cp.calibrate_region(cp.Variant(cp.TAU_KNN, 30), model, x, y, 0.2)
        want = region.tau + region.calibration.cal_phi.mean()
        assert np.allclose(region.threshold(np.array([[0.1], [0.9]])), want, rtol=0, atol=1e-12)

    def test_knn_constant_phi(self):
        model = nf.FlowModel.create(2, c=1, rng=None)
        y, x = Rng(1).normal(60).reshape(30, 2), Rng(2).uniform(30).reshape(30, 1)
        region = cp.calibrate_region(cp.Variant(cp.TAU_KNN, 5), model, x, y, 0.2)
        assert np.all(region.threshold(Rng(3).uniform(7).reshape(7, 1)) == region.tau)

    def test_one_nn_at_calibration_input(self):
        model = random_model(2, c=1, seed=7)
        y, x = Rng(1).normal(60).reshape(30, 2), Rng(2).uniform(30).reshape(30, 1)
        region = cp.calibrate_region(cp.Variant(cp.TAU_KNN, 1), model, x, y, 0.2)
        j = 13
        assert region.threshold(x[j:j + 1])[0] == region.tau + region.calibration.cal_phi[j]

    def test_knn_larger_than_calibration(self):
        model = random_model(2, c=1, seed=7)
        y, x = Rng(1).normal(20).reshape(10, 2), Rng(2).uniform(10).reshape(10, 1)
        with pytest.raises(cp.ConfigurationError):
            cp.calibrate_region(cp.Variant(cp.TAU_KNN, 11), model, x, y, 0.2)

    def test_with_epsilon_moves_anchor(self):
        model = random_model(2, c=1, seed=3)
        y, x = Rng(1).normal(200).reshape(100, 2), Rng(2).uniform(100).reshape(100, 1)
        region = cp.calibrate_region(cp.Variant(cp.TAU_GLOBAL), model, x, y, 0.1)
        direct = cp.calibrate_region(cp.Variant(cp.TAU_GLOBAL), model, x, y, 0.3)
        moved = region.with_epsilon(0.3)
        assert np.array_equal(moved.calibration.anchor_z, direct.calibration.anchor_z)
        assert np.array_equal(moved.threshold(x), direct.threshold(x))


class TestBasePredictor:
    def test_exact_linear(self):
        x = Rng(0).normal(60).reshape(20, 3)
        coef = np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]])
        y = x @ coef + np.array([0.25, -1.0])
        base = cp.fit_base_predictor(x, y, lam=0.0)
        assert np.max(np.abs(base.coef - coef)) <= 1e-8
        assert np.max(np.abs(base.intercept - [0.25, -1.0])) <= 1e-8

    def test_huge_penalty(self):
        x, y = Rng(0).normal(40).reshape(20, 2), Rng(1).normal(20).reshape(20, 1)
        base = cp.fit_base_predictor(x, y, lam=1e12)
        assert np.max(np.abs(base.coef)) < 1e-9
        assert np.allclose(base.intercept, y.mean(axis=0), atol=1e-9)

    def test_gradient_descent_oracle(self):
        rng = Rng(5)
        x, y = rng.normal(150).reshape(50, 3), rng.normal(100).reshape(50, 2)
        lam = 1e-3
        base = cp.fit_base_predictor(x, y, lam)
        # plain gradient descent on the same centred ridge objective
        xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
        w = np.zeros((3, 2))
        step = 1.0 / np.linalg.eigvalsh(xc.T @ xc + lam * np.eye(3)).max()
        for _ in range(20_000):
            w -= step * (xc.T @ (xc @ w - yc) + lam * w)
        assert np.max(np.abs(base.coef - w) / np.abs(w)) <= 1e-4

    def test_no_covariates_predicts_mean(self):
        y = Rng(0).normal(20).reshape(10, 2)
        base = cp.fit_base_predictor(np.empty((10, 0)), y)
        assert np.allclose(base.predict(np.empty((4, 0))), y.mean(axis=0))

    def test_singular_without_penalty(self):
        x = np.ones((10, 2))
        x[:, 1] = 2 * x[:, 0]
        x[:, 0] += np.arange(10)
        x[:, 1] = 2 * x[:, 0]
        with pytest.raises(cp.NumericalError):
            cp.fit_base_predictor(x, np.zeros((10, 1)), lam=0.0)


class TestFitModels:
    def test_no_covariates_rejected(self):
        for kind in (cp.UNCONDITIONAL, cp.POSTERIOR):
            with pytest.raises(cp.ConfigurationError):
                cp.fit_models(cp.Variant(kind), np.empty((20, 0)), np.zeros((20, 2)))

    @pytest.mark.parametrize("kind, d, c", [(cp.ORIGINAL, 2, 1), (cp.UNCONDITIONAL, 2, 0),
                                            (cp.CONDITIONAL, 2, 2), (cp.POSTERIOR, 2, 2)])
    def test_model_shapes(self, kind, d, c):
        ds = dt.generate_conditional(200, 0)
        model, base = cp.fit_models(cp.Variant(kind), ds.x, ds.y, nf.TrainConfig(epochs=1))
        assert (model.d, model.c) == (d, c)
        assert (base is None) == (kind not in cp.NEEDS_BASE)
