import numpy as np
import pytest

from bapm.core import RngStream
from bapm.predict import (
    WEIGHT_FLOOR,
    LearnerConfig,
    PotentialPredictions,
    accuracy_weights,
    fit,
    loo_fit_predict,
    loo_predictions_batch1,
    oracle_score,
    prediction_covariance,
    weights_from_loo,
)

INTERCEPT_ONLY = LearnerConfig(kind="ridge", ridge_penalty=np.inf)


class TestLearnerConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"trees": 0}, {"max_depth": 0}, {"learning_rate": 0.0}, {"learning_rate": 1.5},
         {"ridge_penalty": -1.0}, {"kind": "forest"}, {"cv_folds": 1}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LearnerConfig(**kwargs)


class TestFit:
    def test_ols_exact_line(self):
        x = np.arange(4.0)[:, None]
        y = 2 * x[:, 0] + 1
        m = fit(x, y, LearnerConfig(kind="ols"))
        assert np.allclose(m.predict(x), y, atol=1e-10)

    @pytest.mark.parametrize("kind", ["ols", "ridge", "boosted_trees"])
    def test_constant_targets(self, kind):
        x = np.random.default_rng(0).normal(size=(20, 3))
        m = fit(x, np.full(20, 3.5), LearnerConfig(kind=kind, ridge_penalty=1.0))
        assert np.allclose(m.predict(x), 3.5)

    def test_boosting_beats_ols_on_interaction(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1000, 2))
        y = x[:, 0] * x[:, 1] + rng.normal(scale=0.1, size=1000)
        tr, te = slice(0, 500), slice(500, None)
        gb = LearnerConfig(trees=200, max_depth=2, learning_rate=0.1)
        mse_gb = np.mean((fit(x[tr], y[tr], gb).predict(x[te]) - y[te]) ** 2)
        mse_ols = np.mean((fit(x[tr], y[tr], LearnerConfig(kind="ols")).predict(x[te]) - y[te]) ** 2)
        assert mse_gb < mse_ols

    def test_training_loss_non_increasing(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(60, 4))
        y = np.exp(x[:, 0]) + x[:, 1] * x[:, 2] + rng.normal(size=60)
        loss = fit(x, y, LearnerConfig(cv_folds=0, min_leaf=3)).train_loss
        assert np.all(np.diff(loss) <= 1e-12)

    def test_ridge_large_penalty_gives_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(30, 3))
        y = x @ np.array([1.0, -2.0, 0.5]) + 4.0
        m = fit(x, y, LearnerConfig(kind="ridge", ridge_penalty=1e8))
        assert np.allclose(m.params[1], 0.0, atol=1e-3)
        assert np.allclose(m.predict(x), y.mean(), rtol=1e-3)

    def test_errors(self):
        with pytest.raises(ValueError):
            fit(np.zeros((0, 1)), np.zeros(0), LearnerConfig())
        with pytest.raises(ValueError):
            fit(np.zeros((3, 1)), np.array([0.0, np.nan, 1.0]), LearnerConfig())

    def test_cv_selects_mean_on_pure_noise(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(40, 10))
        y = rng.normal(size=40)
        m = fit(x, y, LearnerConfig())
        # no stage should survive cross-validation on most noise draws; compare to the fixed-stage fit
        m_fixed = fit(x, y, LearnerConfig(cv_folds=0))
        assert np.var(m.predict(x)) < np.var(m_fixed.predict(x))

    def test_subsample_uses_stream(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(40, 3))
        y = x[:, 0] + rng.normal(size=40)
        cfg = LearnerConfig(subsample=0.8)
        a = fit(x, y, cfg, RngStream(1)).predict(x)
        b = fit(x, y, cfg, RngStream(1)).predict(x)
        c = fit(x, y, cfg, RngStream(2)).predict(x)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        with pytest.raises(ValueError):
            fit(x, y, cfg)


class TestLeaveOneOut:
    def test_two_point_mean(self):
        p = loo_fit_predict(np.zeros((2, 1)), [4.0, 8.0], INTERCEPT_ONLY)
        assert p.tolist() == [8.0, 4.0]

    def test_three_point_mean(self):
        p = loo_fit_predict(np.zeros((3, 1)), [1.0, 2.0, 6.0], INTERCEPT_ONLY)
        assert np.allclose(p, [4.0, 3.5, 1.5])

    def test_batch1_structure(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(12, 2))
        z = np.array([1, 0] * 6)
        y = x[:, 0] + z + rng.normal(size=12)
        preds = loo_predictions_batch1(x, z, y, LearnerConfig(kind="ols"))
        t = z == 1
        full0 = fit(x[~t], y[~t], LearnerConfig(kind="ols")).predict(x)
        assert np.allclose(preds.yhat0[t], full0[t])
        assert preds.provenance1[0] == "leave_one_out" and preds.provenance0[0] == "out_of_batch"
        assert preds.provenance1[1] == "out_of_batch" and preds.provenance0[1] == "leave_one_out"

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(16, 3))
        z = np.array([1, 0] * 8)
        y = rng.normal(size=16)
        a = loo_predictions_batch1(x, z, y, LearnerConfig(), RngStream(3))
        b = loo_predictions_batch1(x, z, y, LearnerConfig(), RngStream(3))
        assert np.array_equal(a.matrix(), b.matrix())

    @pytest.mark.parametrize("cfg", [LearnerConfig(), LearnerConfig(kind="ols")])
    def test_own_arm_prediction_ignores_own_outcome(self, cfg):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(14, 2))
        z = np.array([1, 0] * 7)
        y = x[:, 0] + rng.normal(size=14)
        base = loo_predictions_batch1(x, z, y, cfg)
        for i in range(14):
            y2 = y.copy()
            y2[i] += 100.0
            pert = loo_predictions_batch1(x, z, y2, cfg)
            own = base.yhat1 if z[i] == 1 else base.yhat0
            own2 = pert.yhat1 if z[i] == 1 else pert.yhat0
            assert own2[i] == own[i]

    def test_small_arm_rejected(self):
        with pytest.raises(ValueError):
            loo_predictions_batch1(np.zeros((3, 1)), np.array([1, 0, 0]), np.zeros(3), LearnerConfig())


class TestAccuracyWeights:
    def test_perfect_predictions(self):
        preds = PotentialPredictions(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 5.0, 0.0, 7.0]))
        w = weights_from_loo(preds, np.array([1, 0, 1, 0]), np.array([1.0, 5.0, 3.0, 7.0]))
        assert w.w.tolist() == [1.0, 1.0]

    def test_negative_r2_floors(self):
        preds = PotentialPredictions(np.array([3.0, 0.0, 1.0, 0.0]), np.array([0.0, 7.0, 0.0, 5.0]))
        w = weights_from_loo(preds, np.array([1, 0, 1, 0]), np.array([1.0, 5.0, 3.0, 7.0]))
        assert w.w.tolist() == [WEIGHT_FLOOR, WEIGHT_FLOOR]

    def test_zero_variance_arm(self):
        preds = PotentialPredictions(np.array([2.0, 0.0, 2.0, 0.0]), np.array([0.0, 5.0, 0.0, 7.0]))
        w = weights_from_loo(preds, np.array([1, 0, 1, 0]), np.array([2.0, 5.0, 2.0, 7.0]))
        assert w.w[0] == WEIGHT_FLOOR

    def test_calibrated_r2(self):
        # outcomes = prediction + noise with variances set for R^2 of 0.64 and 0.16
        rng = np.random.default_rng(9)
        n = 200_000
        z = np.tile([1, 0], n // 2)
        p = rng.normal(size=n)
        noise_sd = np.where(z == 1, np.sqrt(0.36 / 0.64), np.sqrt(0.84 / 0.16))
        y = p + rng.normal(size=n) * noise_sd
        w = weights_from_loo(PotentialPredictions(p, p), z, y)
        assert w.w == pytest.approx([0.64, 0.16], abs=0.01)

    def test_bounds(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            x = rng.normal(size=(12, 2))
            z = np.array([1, 0] * 6)
            y = rng.normal(size=12) * rng.uniform(0, 3)
            w = accuracy_weights(x, z, y, LearnerConfig(kind="ols"))
            assert np.all((w.w >= WEIGHT_FLOOR) & (w.w <= 1.0))


class TestPredictionCovariance:
    def test_two_points(self):
        s = prediction_covariance(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert np.allclose(s.raw, [[2.0, 2.0], [2.0, 2.0]])
        assert np.linalg.eigvalsh(s.S).min() > 0

    def test_constant(self):
        s = prediction_covariance(np.ones((5, 2)))
        assert np.allclose(s.raw, 0.0)
        assert np.allclose(s.S, s.ridge * np.eye(2)) and s.ridge > 0

    def test_equal_columns(self):
        v = np.random.default_rng(11).normal(size=8)
        s = prediction_covariance(np.column_stack([v, v]))
        assert s.raw[0, 1] == pytest.approx(s.raw[0, 0])

    def test_too_few(self):
        with pytest.raises(ValueError):
            prediction_covariance(np.ones((1, 2)))


class TestOracleScore:
    def test_examples(self):
        assert oracle_score([1, 2], [3, 4]).tolist() == [4.0, 6.0]
        assert oracle_score([1.5, 2.5], [0, 0]).tolist() == [1.5, 2.5]
        perm = np.array([2, 0, 1])
        y1, y0 = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.1, 0.2])
        assert np.array_equal(oracle_score(y1[perm], y0[perm]), oracle_score(y1, y0)[perm])
