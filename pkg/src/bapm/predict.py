"""Outcome models, leave-one-out batch-1 predictions, accuracy weights and the
prediction covariance used by the weighted matching distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from bapm import _trees
from bapm.core import RngStream
from bapm.matching import RIDGE_EPS

WEIGHT_FLOOR = 0.05

OUT_OF_BATCH = "out_of_batch"
LEAVE_ONE_OUT = "leave_one_out"


@dataclass(frozen=True)
class LearnerConfig:
    kind: Literal["boosted_trees", "ols", "ridge"] = "boosted_trees"
    trees: int = 200
    max_depth: int = 2
    learning_rate: float = 0.1
    ridge_penalty: float = 0.0
    min_leaf: int = 1
    subsample: float = 1.0
    cv_folds: int = 5

    def __post_init__(self) -> None:
        if self.kind not in ("boosted_trees", "ols", "ridge"):
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("trees, max_depth and min_leaf must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.ridge_penalty < 0:
            raise ValueError("ridge_penalty must be nonnegative")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.cv_folds < 0 or self.cv_folds == 1:
            raise ValueError("cv_folds must be 0 (off) or at least 2")


@dataclass(frozen=True)
class FittedModel:
    config: LearnerConfig
    n_train: int
    params: tuple
    train_loss: np.ndarray | None = None

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = _as_matrix(features)
        if self.config.kind == "boosted_trees":
            init, feat, thr, val = self.params
            return _trees.boost_predict(x, init, feat, thr, val)
        intercept, coef = self.params
        return intercept + x @ coef


def _as_matrix(features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.ascontiguousarray(x)


def _linear_fit(x: np.ndarray, y: np.ndarray, penalty: float) -> tuple[float, np.ndarray]:
    """Least squares with an unpenalized intercept; ``inf`` penalty gives the mean."""
    xm, ym = x.mean(axis=0), y.mean()
    if np.isinf(penalty):
        return float(ym), np.zeros(x.shape[1])
    xc, yc = x - xm, y - ym
    if penalty > 0:
        a = xc.T @ xc + penalty * np.eye(x.shape[1])
        coef = np.linalg.solve(a, xc.T @ yc)
    else:
        coef = np.linalg.lstsq(xc, yc, rcond=None)[0]
    return float(ym - xm @ coef), coef


def fit(features, targets, config: LearnerConfig, rng: RngStream | None = None) -> FittedModel:
    x = _as_matrix(features)
    y = np.asarray(targets, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("features and targets disagree on row count")
    if y.shape[0] < 1:
        raise ValueError("need at least 1 training row")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite values")
    if config.kind == "boosted_trees":
        if config.subsample < 1.0:
            if rng is None:
                raise ValueError("row subsampling needs an rng stream")
            draws = rng.generator().random((config.trees, x.shape[0]))
            init, feat, thr, val, loss = _trees.boost_fit(
                x, y, config.trees, config.max_depth, config.learning_rate,
                config.min_leaf, draws, config.subsample,
            )
        else:
            init, feat, thr, val, loss = _trees.boost_fit_cv(
                x, y, config.trees, config.max_depth, config.learning_rate,
                config.min_leaf, config.cv_folds,
            )
        return FittedModel(config, len(y), (init, feat, thr, val), loss)
    penalty = config.ridge_penalty if config.kind == "ridge" else 0.0
    return FittedModel(config, len(y), _linear_fit(x, y, penalty))


def loo_fit_predict(features, targets, config: LearnerConfig, rng: RngStream | None = None) -> np.ndarray:
    """Prediction for each row from a model fit on the remaining rows."""
    x = _as_matrix(features)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    if n < 2:
        raise ValueError("leave-one-out needs at least 2 rows")
    if config.kind == "boosted_trees" and config.subsample == 1.0:
        return _trees.boost_loo(
            x, y, config.trees, config.max_depth, config.learning_rate, config.min_leaf, config.cv_folds
        )
    out = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        sub = rng.child(i) if rng is not None else None
        out[i] = fit(x[keep], y[keep], config, sub).predict(x[i : i + 1])[0]
    return out


@dataclass(frozen=True)
class PotentialPredictions:
    yhat1: np.ndarray
    yhat0: np.ndarray
    provenance1: tuple[str, ...] = ()
    provenance0: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        y1 = np.asarray(self.yhat1, dtype=float)
        y0 = np.asarray(self.yhat0, dtype=float)
        if y1.shape != y0.shape or y1.ndim != 1:
            raise ValueError("yhat1 and yhat0 must be vectors of equal length")
        if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y0))):
            raise ValueError("predictions must be finite")
        object.__setattr__(self, "yhat1", y1)
        object.__setattr__(self, "yhat0", y0)
        n = len(y1)
        for name in ("provenance1", "provenance0"):
            tags = tuple(getattr(self, name)) or (OUT_OF_BATCH,) * n
            if len(tags) != n:
                raise ValueError(f"{name} must tag every unit")
            object.__setattr__(self, name, tags)

    @property
    def n(self) -> int:
        return len(self.yhat1)

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.yhat1, self.yhat0])

    def subset(self, idx) -> PotentialPredictions:
        idx = np.asarray(idx)
        return PotentialPredictions(
            self.yhat1[idx], self.yhat0[idx],
            tuple(self.provenance1[i] for i in idx), tuple(self.provenance0[i] for i in idx),
        )


@dataclass(frozen=True)
class AccuracyWeights:
    w: np.ndarray
    r2: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        if w.shape != (2,) or np.any(w <= 0) or np.any(w > 1):
            raise ValueError("accuracy weights must be two values in (0, 1]")
        object.__setattr__(self, "w", w)

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.w)


@dataclass(frozen=True)
class PredCovariance:
    raw: np.ndarray
    ridge: float

    @property
    def S(self) -> np.ndarray:
        return self.raw + self.ridge * np.eye(2)


def _split_arms(x1, z1, y1):
    x = _as_matrix(x1)
    z = np.asarray(z1).astype(np.int64)
    y = np.asarray(y1, dtype=float)
    if not (x.shape[0] == len(z) == len(y)):
        raise ValueError("batch-1 covariates, assignments and outcomes disagree in length")
    for arm in (0, 1):
        if np.sum(z == arm) < 2:
            raise ValueError(f"arm {arm} has fewer than 2 batch-1 units")
    return x, z, y


def fit_arm_models(x1, z1, y1, config: LearnerConfig, rng: RngStream | None = None):
    """Full-data models (f0, f1) for each arm of batch 1."""
    x, z, y = _split_arms(x1, z1, y1)
    r = rng if rng is not None else RngStream(0)
    f0 = fit(x[z == 0], y[z == 0], config, r.child(0))
    f1 = fit(x[z == 1], y[z == 1], config, r.child(1))
    return f0, f1


def loo_predictions_batch1(
    x1, z1, y1, config: LearnerConfig, rng: RngStream | None = None, models=None
) -> PotentialPredictions:
    """Batch-1 predictions: own arm left-one-out, opposite arm from the full other-arm model."""
    x, z, y = _split_arms(x1, z1, y1)
    r = rng if rng is not None else RngStream(0)
    f0, f1 = models if models is not None else fit_arm_models(x, z, y, config, r)
    yhat1 = f1.predict(x)
    yhat0 = f0.predict(x)
    t, c = np.flatnonzero(z == 1), np.flatnonzero(z == 0)
    yhat1[t] = loo_fit_predict(x[t], y[t], config, r.child(11))
    yhat0[c] = loo_fit_predict(x[c], y[c], config, r.child(10))
    prov1 = tuple(LEAVE_ONE_OUT if zi == 1 else OUT_OF_BATCH for zi in z)
    prov0 = tuple(LEAVE_ONE_OUT if zi == 0 else OUT_OF_BATCH for zi in z)
    return PotentialPredictions(yhat1, yhat0, prov1, prov0)


def _r2(pred: np.ndarray, obs: np.ndarray) -> float:
    sst = float(np.sum((obs - obs.mean()) ** 2))
    if sst <= 0:
        return float("nan")
    return 1.0 - float(np.sum((obs - pred) ** 2)) / sst


def weights_from_loo(preds: PotentialPredictions, z1, y1) -> AccuracyWeights:
    """w_z = clamp(leave-one-out R^2 of arm z, 0.05, 1); undefined R^2 maps to the floor."""
    z = np.asarray(z1).astype(np.int64)
    y = np.asarray(y1, dtype=float)
    r2 = np.array([
        _r2(preds.yhat1[z == 1], y[z == 1]),
        _r2(preds.yhat0[z == 0], y[z == 0]),
    ])
    w = np.where(np.isnan(r2), WEIGHT_FLOOR, np.clip(np.nan_to_num(r2, nan=0.0), WEIGHT_FLOOR, 1.0))
    return AccuracyWeights(w, r2)


def accuracy_weights(x1, z1, y1, config: LearnerConfig, rng: RngStream | None = None) -> AccuracyWeights:
    preds = loo_predictions_batch1(x1, z1, y1, config, rng)
    return weights_from_loo(preds, z1, y1)


def prediction_covariance(preds) -> PredCovariance:
    """2 x 2 sample covariance of (yhat1, yhat0) plus the always-on ridge."""
    y = preds.matrix() if hasattr(preds, "matrix") else np.asarray(preds, dtype=float)
    if y.shape[0] < 2:
        raise ValueError("prediction covariance needs at least 2 units")
    raw = np.cov(y, rowvar=False, ddof=1)
    tr = float(np.trace(raw))
    return PredCovariance(raw, RIDGE_EPS * tr / 2 if tr > 0 else RIDGE_EPS)


def oracle_score(y1_true, y0_true) -> np.ndarray:
    """Infeasible benchmark score Y(1) + Y(0) per unit."""
    return np.asarray(y1_true, dtype=float) + np.asarray(y0_true, dtype=float)
