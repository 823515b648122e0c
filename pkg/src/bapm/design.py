"""Design drivers: complete randomization, Mahalanobis pair matching, the two
within-batch matchers and batch-adaptive pair matching.

Every driver draws its randomness from labelled children of the supplied
stream (0: batch split, 1: batch-1 coins, 2: learner, 3: batch-2 coins), so a
design is a pure function of (sample, config, stream, oracle).  Outcomes are
requested from the oracle only for batch-1 units, and only after their
assignments are fixed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bapm.core import PairedOrder, Pairing, RngStream, Sample, validate_paired_assignment
from bapm.matching import (
    DistanceMatrix,
    _pairwise_euclidean,
    forbid_same_arm_batch1,
    mahalanobis_coordinates,
    mahalanobis_distances,
    min_weight_perfect_matching,
    order_pairs_for_inference,
    pair_scores_from_unit_scores,
    penalized_ols_distances,
    quantization_step,
    weighted_prediction_coordinates,
)
from bapm.predict import (
    AccuracyWeights,
    LearnerConfig,
    PotentialPredictions,
    PredCovariance,
    fit_arm_models,
    loo_predictions_batch1,
    prediction_covariance,
    weights_from_loo,
)

OutcomeOracle = Callable[[int, int], float]

SPLIT, COINS_B1, LEARNER, COINS_B2 = 0, 1, 2, 3


class Method(str, enum.Enum):
    """Design/analysis combinations, in canonical reporting order."""

    BAPM_PLUS = "BAPM+"
    BAPM = "BAPM"
    WBPM = "WBPM"
    WBPM_OLS = "WBPM-OLS"
    MH = "MH"
    CR = "CR"
    CR_PLUS = "CR+"
    ORACLE = "ORACLE"

    @classmethod
    def parse(cls, text: str) -> Method:
        key = text.strip().upper().replace("_", "-")
        aliases = {"BAPM-PLUS": "BAPM+", "CR-PLUS": "CR+", "WBPMOLS": "WBPM-OLS"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown method {text!r}")

    @property
    def rank(self) -> int:
        return list(Method).index(self)


@dataclass(frozen=True)
class DesignConfig:
    method: Method = Method.BAPM_PLUS
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    batch1_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.batch1_fraction < 1.0:
            raise ValueError("batch1_fraction must lie in (0, 1)")

    def batch1_size(self, n: int) -> int:
        n1 = self.batch1_fraction * n
        size = int(round(n1))
        if abs(n1 - size) > 1e-9 or size % 2 or size < 2 or size > n - 2:
            raise ValueError(f"batch1_fraction * n = {n1} is not an even batch size in [2, n-2]")
        return size


@dataclass(frozen=True)
class Block:
    members: tuple[int, ...]
    pi_b: float | None = None

    @property
    def n_b(self) -> int:
        return len(self.members)


@dataclass
class DesignResult:
    method: Method
    assignment: np.ndarray
    pairing: Pairing | None = None
    ordered: PairedOrder | None = None
    blocks: list[Block] = field(default_factory=list)
    predictions: PotentialPredictions | None = None
    stage1_pairing: Pairing | None = None
    batch: np.ndarray | None = None
    weights: AccuracyWeights | None = None
    covariance: PredCovariance | None = None
    weighted_total_rematched: float | None = None
    weighted_total_stage1: float | None = None
    weighted_total_tolerance: float = 0.0
    flags: tuple[str, ...] = ()

    @property
    def rematch_improves(self) -> bool:
        if self.weighted_total_rematched is None:
            return True
        return self.weighted_total_rematched <= self.weighted_total_stage1 + self.weighted_total_tolerance


def assign_within_pairs(pairing: Pairing, rng: RngStream, n: int | None = None) -> np.ndarray:
    """One fair coin per pair; the coin treats the smaller-index member on heads."""
    n = n if n is not None else (int(pairing.units().max()) + 1 if len(pairing) else 0)
    z = np.full(n, -1, dtype=np.int64)
    coins = rng.generator().integers(0, 2, size=len(pairing))
    for (a, b), c in zip(pairing, coins):
        z[a], z[b] = c, 1 - c
    return z


def make_blocks(ordered: PairedOrder, z: np.ndarray) -> list[Block]:
    """Blocks of four from consecutive ordered pairs; an odd final pair joins the last block."""
    pairs = list(ordered)
    groups = [pairs[i : i + 2] for i in range(0, len(pairs) - 1, 2)]
    if len(pairs) % 2:
        if groups:
            groups[-1] = groups[-1] + [pairs[-1]]
        else:
            groups = [[pairs[-1]]]
    blocks = []
    for g in groups:
        members = tuple(u for p in g for u in p)
        blocks.append(Block(members, float(np.mean(z[list(members)]))))
    return blocks


def _finish_paired(method, sample, pairing, z, unit_scores, **extra) -> DesignResult:
    if not validate_paired_assignment(pairing, z):
        raise AssertionError("paired assignment violated")
    ordered = order_pairs_for_inference(pairing, pair_scores_from_unit_scores(pairing, unit_scores), z)
    return DesignResult(
        method=method, assignment=z, pairing=pairing, ordered=ordered,
        blocks=make_blocks(ordered, z), **extra,
    )


def _sample(sample) -> Sample:
    return sample if isinstance(sample, Sample) else Sample(np.asarray(sample, dtype=float))


def run_cr(sample, rng: RngStream, method: Method = Method.CR) -> DesignResult:
    sample = _sample(sample)
    n = sample.n
    z = np.zeros(n, dtype=np.int64)
    z[rng.child(SPLIT).generator().permutation(n)[: n // 2]] = 1
    return DesignResult(method=method, assignment=z)


def run_mh(sample, rng: RngStream) -> DesignResult:
    sample = _sample(sample)
    coords = mahalanobis_coordinates(sample.covariates)
    pairing = min_weight_perfect_matching(DistanceMatrix(_pairwise_euclidean(coords)))
    z = assign_within_pairs(pairing, rng.child(COINS_B1), sample.n)
    return _finish_paired(Method.MH, sample, pairing, z, coords.sum(axis=1))


def run_oracle(sample, rng: RngStream, score) -> DesignResult:
    """Benchmark design pairing adjacent units in the ordering of an infeasible score."""
    sample = _sample(sample)
    g = np.asarray(score, dtype=float)
    order = np.lexsort((np.arange(sample.n), g))
    pairing = Pairing(tuple((int(order[i]), int(order[i + 1])) for i in range(0, sample.n, 2)))
    z = assign_within_pairs(pairing, rng.child(COINS_B1), sample.n)
    return _finish_paired(Method.ORACLE, sample, pairing, z, g)


def _query(oracle: OutcomeOracle, units, z) -> np.ndarray:
    return np.array([float(oracle(int(u), int(z[u]))) for u in units])


def _sub_matching(d: np.ndarray, units: np.ndarray) -> Pairing:
    dm = DistanceMatrix(d[np.ix_(units, units)])
    local = min_weight_perfect_matching(dm)
    return Pairing(tuple((int(units[a]), int(units[b])) for a, b in local))


def run_bapm(
    sample, config: DesignConfig, rng: RngStream, outcome_oracle: OutcomeOracle,
    method: Method = Method.BAPM,
) -> DesignResult:
    sample = _sample(sample)
    n = sample.n
    x = sample.covariates
    n1 = config.batch1_size(n)

    stage1 = min_weight_perfect_matching(mahalanobis_distances(sample))
    chosen = rng.child(SPLIT).generator().choice(len(stage1), size=n1 // 2, replace=False)
    b1_pairs = Pairing(tuple(stage1.pairs[i] for i in sorted(chosen)))
    batch = np.full(n, 2, dtype=np.int64)
    batch[b1_pairs.units()] = 1
    sample = sample.with_batch(batch)
    b1, b2 = np.flatnonzero(batch == 1), np.flatnonzero(batch == 2)

    z = assign_within_pairs(b1_pairs, rng.child(COINS_B1), n)
    y1 = _query(outcome_oracle, b1, z)
    z1 = z[b1]

    lrng = rng.child(LEARNER)
    models = fit_arm_models(x[b1], z1, y1, config.learner, lrng)
    loo = loo_predictions_batch1(x[b1], z1, y1, config.learner, lrng, models=models)
    weights = weights_from_loo(loo, z1, y1)
    yhat1 = np.empty(n)
    yhat0 = np.empty(n)
    yhat1[b1], yhat0[b1] = loo.yhat1, loo.yhat0
    yhat1[b2], yhat0[b2] = models[1].predict(x[b2]), models[0].predict(x[b2])
    prov1 = ["out_of_batch"] * n
    prov0 = ["out_of_batch"] * n
    for k, u in enumerate(b1):
        prov1[u], prov0[u] = loo.provenance1[k], loo.provenance0[k]
    preds = PotentialPredictions(yhat1, yhat0, tuple(prov1), tuple(prov0))
    cov = prediction_covariance(preds)

    coords = weighted_prediction_coordinates(preds, weights, cov)
    d_w = DistanceMatrix(_pairwise_euclidean(coords))
    d_forbid = forbid_same_arm_batch1(d_w, sample, z)
    pairing = min_weight_perfect_matching(d_forbid)
    if any(d_forbid.forbidden_mask()[a, b] for a, b in pairing):
        raise AssertionError("rematching used a forbidden batch-1 edge")

    coins = rng.child(COINS_B2).generator().integers(0, 2, size=len(pairing))
    z_final = z.copy()
    for (a, b), c in zip(pairing, coins):
        if batch[a] == 2 and batch[b] == 2:
            z_final[a], z_final[b] = c, 1 - c
        elif batch[a] == 1 and batch[b] == 2:
            z_final[b] = 1 - z[a]
        elif batch[a] == 2 and batch[b] == 1:
            z_final[a] = 1 - z[b]
    if not np.array_equal(z_final[b1], z[b1]):
        raise AssertionError("batch-1 assignments changed during rematching")

    return _finish_paired(
        method, sample, pairing, z_final, coords.sum(axis=1),
        predictions=preds, stage1_pairing=stage1, batch=batch, weights=weights,
        covariance=cov, weighted_total_rematched=d_w.total(pairing),
        weighted_total_stage1=d_w.total(stage1),
        weighted_total_tolerance=len(pairing) * quantization_step(d_w) + 1e-12 * max(d_w.total(stage1), 1.0),
    )


def _within_batch_start(sample: Sample, config: DesignConfig, rng: RngStream, oracle: OutcomeOracle):
    """Random unit split, batch-1 Mahalanobis pairing and coins, batch-1 outcomes."""
    n = sample.n
    n1 = config.batch1_size(n)
    perm = rng.child(SPLIT).generator().permutation(n)
    batch = np.full(n, 2, dtype=np.int64)
    batch[perm[:n1]] = 1
    b1, b2 = np.flatnonzero(batch == 1), np.flatnonzero(batch == 2)
    m_coords = mahalanobis_coordinates(sample.covariates)
    pairs1 = _sub_matching(_pairwise_euclidean(m_coords), b1)
    z = assign_within_pairs(pairs1, rng.child(COINS_B1), n)
    y1 = _query(oracle, b1, z)
    return batch, b1, b2, pairs1, z, y1


def _assign_batch2(pairs2: Pairing, z: np.ndarray, rng: RngStream) -> np.ndarray:
    coins = rng.child(COINS_B2).generator().integers(0, 2, size=len(pairs2))
    z = z.copy()
    for (a, b), c in zip(pairs2, coins):
        z[a], z[b] = c, 1 - c
    return z


def run_wbpm(sample, config: DesignConfig, rng: RngStream, outcome_oracle: OutcomeOracle) -> DesignResult:
    sample = _sample(sample)
    x = sample.covariates
    batch, b1, b2, pairs1, z, y1 = _within_batch_start(sample, config, rng, outcome_oracle)
    f0, f1 = fit_arm_models(x[b1], z[b1], y1, config.learner, rng.child(LEARNER))
    preds = PotentialPredictions(f1.predict(x), f0.predict(x))
    cov = prediction_covariance(preds.subset(b2))
    coords = weighted_prediction_coordinates(preds, np.ones(2), cov)
    pairs2 = _sub_matching(_pairwise_euclidean(coords), b2)
    z = _assign_batch2(pairs2, z, rng)
    return _finish_paired(
        Method.WBPM, sample, pairs1.union(pairs2), z, coords.sum(axis=1),
        predictions=preds, batch=batch, covariance=cov,
    )


def pooled_ols(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Slopes of y on (1, x) and their homoskedastic covariance; ridge fallback when singular."""
    n, k = x.shape
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    gram = xc.T @ xc
    fallback = n <= k + 1 or np.linalg.matrix_rank(gram) < k
    if fallback:
        gram = gram + 1e-6 * max(np.trace(gram) / k, 1e-12) * np.eye(k)
    inv = np.linalg.inv(gram)
    beta = inv @ (xc.T @ yc)
    dof = max(n - k - 1, 1)
    sigma2 = float(np.sum((yc - xc @ beta) ** 2)) / dof
    return beta, sigma2 * inv, fallback


def run_wbpm_ols(sample, config: DesignConfig, rng: RngStream, outcome_oracle: OutcomeOracle) -> DesignResult:
    sample = _sample(sample)
    x = sample.covariates
    batch, b1, b2, pairs1, z, y1 = _within_batch_start(sample, config, rng, outcome_oracle)
    beta, beta_cov, fallback = pooled_ols(x[b1], y1)
    d2 = penalized_ols_distances(x[b2], beta, beta_cov)
    local = min_weight_perfect_matching(d2)
    pairs2 = Pairing(tuple((int(b2[a]), int(b2[b])) for a, b in local))
    z = _assign_batch2(pairs2, z, rng)
    return _finish_paired(
        Method.WBPM_OLS, sample, pairs1.union(pairs2), z, x @ beta, batch=batch,
        flags=("ols_ridge_fallback",) if fallback else (),
    )


def run_design(
    sample, config: DesignConfig, rng: RngStream, outcome_oracle: OutcomeOracle | None = None,
    oracle_score=None,
) -> DesignResult:
    m = config.method
    if m in (Method.CR, Method.CR_PLUS):
        return run_cr(sample, rng, m)
    if m is Method.MH:
        return run_mh(sample, rng)
    if m is Method.ORACLE:
        return run_oracle(sample, rng, oracle_score)
    if outcome_oracle is None:
        raise ValueError(f"{m.value} needs an outcome oracle")
    if m in (Method.BAPM, Method.BAPM_PLUS):
        return run_bapm(sample, config, rng, outcome_oracle, m)
    if m is Method.WBPM:
        return run_wbpm(sample, config, rng, outcome_oracle)
    return run_wbpm_ols(sample, config, rng, outcome_oracle)


def _nearest_pairs(coords: np.ndarray) -> tuple[list[tuple[int, int]], list[int]]:
    """Optimal pairing of rows; with an odd count a zero-cost dummy absorbs one leftover."""
    m = coords.shape[0]
    d = _pairwise_euclidean(coords)
    if m % 2:
        d = np.pad(d, ((0, 1), (0, 1)))
    pairing = min_weight_perfect_matching(DistanceMatrix(d))
    pairs, left = [], []
    for a, b in pairing:
        if b == m:
            left.append(a)
        else:
            pairs.append((a, b))
    return pairs, left


def restratify_after_attrition(survivors, predictions, z: np.ndarray | None = None) -> list[Block]:
    """Re-form blocks of four among surviving units from their predicted outcomes.

    ``predictions`` gives one row per survivor: a PotentialPredictions, an
    m x 2 matrix (whitened by its covariance) or a vector of scalar scores.
    Units are paired, pairs are paired by centroid, and 1-3 leftover units join
    the block with the nearest centroid.
    """
    units = np.asarray(survivors, dtype=np.int64)
    m = len(units)
    if m < 4:
        raise ValueError(f"need at least 4 survivors to form a block, got {m}")
    if isinstance(predictions, PotentialPredictions):
        p = predictions.matrix()
    else:
        p = np.asarray(predictions, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[0] != m:
        raise ValueError("one prediction row per survivor is required")
    if p.shape[1] > 1:
        cov = prediction_covariance(p) if p.shape[1] == 2 else None
        p = weighted_prediction_coordinates(p, np.ones(2), cov) if cov is not None else p
    pairs, left = _nearest_pairs(p)
    centroids = np.array([(p[a] + p[b]) / 2 for a, b in pairs])
    quads, left_pairs = _nearest_pairs(centroids)
    groups = [list(pairs[i]) + list(pairs[j]) for i, j in quads]
    for lp in left_pairs:
        left.extend(pairs[lp])
    for u in sorted(left):
        cents = np.array([p[g].mean(axis=0) for g in groups])
        k = int(np.argmin(np.linalg.norm(cents - p[u], axis=1)))
        groups[k].append(u)
    blocks = []
    for g in groups:
        members = tuple(sorted(int(units[i]) for i in g))
        pi_b = float(np.mean(z[list(members)])) if z is not None else None
        blocks.append(Block(members, pi_b))
    return blocks
