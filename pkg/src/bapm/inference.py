"""Estimators and variance estimators for the paired and randomized designs,
plus the error decomposition of the cross-fit adjusted estimator.

Three analyses are provided:

* the pairs-of-pairs matched-pair t-test (``brs_test``), which corrects the
  naive pair-difference variance with products of adjacent pair differences;
* a block-stratified cross-fit AIPW estimator (``stratified_adjusted_estimate``)
  for blocks of four formed from consecutive ordered pairs;
* complete-randomization analyses: Neyman difference in means and its
  cross-fit adjusted counterpart (``cr_plus_estimate``).

Per-unit adjusted scores are

    phi_i = Z_i / pi (Y_i - mu1(X_i)) - (1 - Z_i) / (1 - pi) (Y_i - mu0(X_i))
            + mu1(X_i) - mu0(X_i)

with mu fitted on folds that exclude unit i.  Block variances sum arm-wise
sample variances within each stratum; ``variance_form`` selects which per-unit
quantity enters them (see ``_arm_quantity``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.stats import norm

from bapm.core import PairedOrder, RngStream
from bapm.predict import LearnerConfig, fit

VarianceForm = Literal["displayed", "residual", "influence"]


@dataclass(frozen=True)
class EstimateReport:
    tau_hat: float
    se: float
    ci_low: float
    ci_high: float
    variance_kind: str
    flags: tuple[str, ...] = ()

    @classmethod
    def build(cls, tau_hat: float, variance: float, kind: str, flags=(), level: float = 0.95):
        flags = tuple(flags)
        if not np.isfinite(variance) or variance < 0:
            flags = flags + ("variance_floored",)
            variance = 0.0
        se = float(np.sqrt(variance))
        half = norm.ppf(0.5 + level / 2) * se
        return cls(float(tau_hat), se, float(tau_hat - half), float(tau_hat + half), kind, flags)

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        half = norm.ppf(0.5 + level / 2) * self.se
        return self.tau_hat - half, self.tau_hat + half

    def covers(self, tau: float) -> bool:
        return self.ci_low <= tau <= self.ci_high


def _arms(z) -> np.ndarray:
    z = np.asarray(z)
    if not np.all(np.isin(z, (0, 1))):
        raise ValueError("assignments must be 0/1")
    return z.astype(np.int64)


def difference_in_means(y, z) -> float:
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    if not (np.any(z == 1) and np.any(z == 0)):
        raise ValueError("both arms must be nonempty")
    return float(y[z == 1].mean() - y[z == 0].mean())


def brs_components(diffs) -> dict[str, float]:
    """tau, delta^2, lambda^2 and v from signed treated-minus-control pair differences in order."""
    d = np.asarray(diffs, dtype=float)
    n = len(d)
    tau = d.mean()
    delta2 = float(np.mean(d * d))
    m = n // 2
    lam2 = float(2.0 / n * np.sum(d[0 : 2 * m : 2] * d[1 : 2 * m : 2]))
    v = delta2 - 0.5 * (lam2 + tau * tau)
    return {"tau": float(tau), "delta2": delta2, "lambda2": lam2, "v": float(v), "n_pairs": n}


def brs_test(ordered: PairedOrder | Sequence[tuple[int, int]], y, z) -> EstimateReport:
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    pairs = list(ordered)
    if not pairs:
        raise ValueError("no pairs to analyze")
    diffs = np.empty(len(pairs))
    for m, (a, b) in enumerate(pairs):
        sign = z[a] - z[b]
        if sign == 0:
            raise ValueError(f"pair ({a}, {b}) does not hold one treated and one control unit")
        diffs[m] = (y[a] - y[b]) * sign
    c = brs_components(diffs)
    return EstimateReport.build(c["tau"], c["v"] / c["n_pairs"], "BRS")


def neyman_variance_cr(y, z) -> EstimateReport:
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    y1, y0 = y[z == 1], y[z == 0]
    if len(y1) < 2 or len(y0) < 2:
        raise ValueError("each arm needs at least 2 units")
    v = y1.var(ddof=1) / len(y1) + y0.var(ddof=1) / len(y0)
    return EstimateReport.build(y1.mean() - y0.mean(), v, "NEYMAN_CR")


def adjusted_scores(y, z, pi, mu1, mu0) -> np.ndarray:
    y, mu1, mu0 = (np.asarray(a, dtype=float) for a in (y, mu1, mu0))
    z = _arms(z)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), y.shape)
    return z / pi * (y - mu1) - (1 - z) / (1 - pi) * (y - mu0) + mu1 - mu0


def _arm_quantity(y, z, pi, mu1, mu0, form: VarianceForm) -> np.ndarray:
    """Per-unit quantity whose within-stratum arm variance enters the variance sum.

    displayed:  inverse-probability-weighted residual plus the own-arm prediction
    residual:   own-arm residual Y - mu_z(X)
    """
    resid = np.where(z == 1, y - mu1, y - mu0)
    if form == "residual":
        return resid
    if form == "displayed":
        p_own = np.where(z == 1, pi, 1 - pi)
        return resid / p_own + np.where(z == 1, mu1, mu0)
    raise ValueError(f"unknown variance form {form!r}")


def _strata_variance(groups, y, z, pi, mu1, mu0, form: VarianceForm, n_total: int) -> float:
    q = _arm_quantity(y, z, pi, mu1, mu0, form)
    v = 0.0
    for g in groups:
        g = np.asarray(g)
        term = 0.0
        for arm in (0, 1):
            vals = q[g[z[g] == arm]]
            term += vals.var(ddof=1) / len(vals)
        v += len(g) ** 2 * term
    return v / n_total**2


def _variance_groups(blocks, z) -> tuple[list[np.ndarray], bool]:
    """Blocks in order; any block with a single unit in an arm is pooled with its neighbour."""
    groups = [np.asarray(b, dtype=np.int64) for b in blocks]
    pooled = False

    def ok(g):
        return np.sum(z[g] == 1) >= 2 and np.sum(z[g] == 0) >= 2

    i = 0
    while i < len(groups):
        if ok(groups[i]) or len(groups) == 1:
            i += 1
            continue
        pooled = True
        j = i + 1 if i + 1 < len(groups) else i - 1
        lo, hi = min(i, j), max(i, j)
        groups[lo] = np.concatenate([groups[lo], groups[hi]])
        del groups[hi]
        i = lo
    if not ok(groups[0]):
        raise ValueError("too few units per arm to estimate a variance")
    return groups, pooled


def _members(block) -> np.ndarray:
    return np.asarray(getattr(block, "members", block), dtype=np.int64)


def stratified_from_predictions(
    blocks, y, z, mu1, mu0, variance_form: VarianceForm = "residual"
) -> EstimateReport:
    """Block-stratified adjusted estimate from given cross-fit predictions."""
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    mu1 = np.asarray(mu1, dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    members = [_members(b) for b in blocks]
    n_total = sum(len(m) for m in members)
    pi = np.empty(len(y))
    tau = 0.0
    for m in members:
        p = z[m].mean()
        if p in (0.0, 1.0):
            raise ValueError(f"block {m.tolist()} lacks one arm; restratify first")
        pi[m] = p
        tau += len(m) * adjusted_scores(y[m], z[m], p, mu1[m], mu0[m]).mean()
    tau /= n_total
    flags: tuple[str, ...] = ()
    idx = np.concatenate(members)
    if variance_form == "influence":
        phi = adjusted_scores(y[idx], z[idx], pi[idx], mu1[idx], mu0[idx])
        v = float(np.sum((phi - tau) ** 2)) / (n_total * (n_total - 1))
    else:
        groups, pooled = _variance_groups(members, z)
        if pooled:
            flags = ("variance_blocks_pooled",)
        v = _strata_variance(groups, y, z, pi, mu1, mu0, variance_form, n_total)
    return EstimateReport.build(tau, v, "STRAT_ADJ", flags)


def _fold_labels(n_groups: int, folds: int, rng: RngStream) -> np.ndarray:
    folds = max(2, min(folds, n_groups))
    perm = rng.generator().permutation(n_groups)
    labels = np.empty(n_groups, dtype=np.int64)
    labels[perm] = np.arange(n_groups) % folds
    return labels


def cross_fit_predictions(
    unit_fold: np.ndarray, y, z, covariates, learner: LearnerConfig, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """mu1, mu0 for each unit from arm models fit outside the unit's fold."""
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    mu1 = np.full(len(y), np.nan)
    mu0 = np.full(len(y), np.nan)
    for f in np.unique(unit_fold):
        test = unit_fold == f
        train = ~test
        for arm, mu in ((1, mu1), (0, mu0)):
            rows = train & (z == arm)
            if rows.sum() < 2:
                raise ValueError(f"fold {f}: fewer than 2 training units in arm {arm}")
            model = fit(x[rows], y[rows], learner, rng.child(int(f)).child(arm))
            mu[test] = model.predict(x[test])
    return mu1, mu0


def stratified_adjusted_estimate(
    blocks, y, z, covariates, learner: LearnerConfig, folds: int = 5,
    rng: RngStream | None = None, variance_form: VarianceForm = "residual",
) -> EstimateReport:
    """Cross-fit (at block granularity) stratified AIPW estimate for blocks of units."""
    rng = rng if rng is not None else RngStream(0)
    members = [_members(b) for b in blocks]
    n = len(np.asarray(y))
    labels = _fold_labels(len(members), folds, rng.child(0))
    unit_fold = np.full(n, -1, dtype=np.int64)
    for lab, m in zip(labels, members):
        unit_fold[m] = lab
    mu1, mu0 = cross_fit_predictions(unit_fold, y, z, covariates, learner, rng.child(1))
    return stratified_from_predictions(members, y, z, mu1, mu0, variance_form)


def cr_plus_from_predictions(
    y, z, mu1, mu0, unit_fold=None, variance_form: VarianceForm = "influence"
) -> EstimateReport:
    """Whole-sample adjusted estimate with pi the realized treated fraction."""
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    n = len(y)
    pi = z.mean()
    phi = adjusted_scores(y, z, pi, mu1, mu0)
    tau = phi.mean()
    if variance_form == "influence":
        v = float(np.sum((phi - tau) ** 2)) / (n * (n - 1))
    else:
        groups = [np.flatnonzero(unit_fold == f) for f in np.unique(unit_fold)] if unit_fold is not None else [np.arange(n)]
        pis = np.full(n, pi)
        v = _strata_variance(groups, y, z, pis, np.asarray(mu1, float), np.asarray(mu0, float), variance_form, n)
    return EstimateReport.build(tau, v, "NEYMAN_CR_ADJ")


def cr_plus_estimate(
    y, z, covariates, learner: LearnerConfig, folds: int = 5, rng: RngStream | None = None,
    variance_form: VarianceForm = "influence",
) -> EstimateReport:
    rng = rng if rng is not None else RngStream(0)
    n = len(np.asarray(y))
    unit_fold = _fold_labels(n, folds, rng.child(0))
    mu1, mu0 = cross_fit_predictions(unit_fold, y, z, covariates, learner, rng.child(1))
    return cr_plus_from_predictions(y, z, mu1, mu0, unit_fold, variance_form)


@dataclass(frozen=True)
class MseDecomposition:
    psi_bar: float
    imbalance: np.ndarray
    delta_n: np.ndarray
    cross_term: float
    quad_term: float
    second_term: float

    @property
    def error(self) -> float:
        """Estimator error implied by the decomposition: psi_bar - imbalance . delta_n."""
        return self.psi_bar - self.second_term


def linear_adjusted_estimate(y, z, covariates, beta1, beta0, pi: float) -> float:
    """Adjusted estimator with fixed linear coefficients (no intercept is added)."""
    x = np.asarray(covariates, dtype=float)
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    return float(adjusted_scores(y, z, pi, x @ np.asarray(beta1), x @ np.asarray(beta0)).mean())


def mse_decomposition(
    y, z, covariates, beta_hat1, beta_hat0, beta_star1, beta_star0, pi: float,
    tau: float | None = None,
) -> MseDecomposition:
    """Split the adjusted estimator's error into the oracle influence mean and the imbalance term.

    The influence term carries X (beta*_1 - beta*_0) so it has mean zero, and
    tau_hat - tau = psi_bar - imbalance . delta_n holds exactly for any tau.
    ``tau`` defaults to mean(X) . (beta*_1 - beta*_0).
    """
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must lie in (0, 1)")
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    z = _arms(z)
    b1, b0, s1, s0 = (np.asarray(b, dtype=float) for b in (beta_hat1, beta_hat0, beta_star1, beta_star0))
    k = x.shape[1]
    if not all(b.shape == (k,) for b in (b1, b0, s1, s0)) or len(y) != x.shape[0] or len(z) != x.shape[0]:
        raise ValueError("dimension mismatch")
    n = len(y)
    if tau is None:
        tau = float(x.mean(axis=0) @ (s1 - s0))
    psi = z * (y - x @ s1) / pi - (1 - z) * (y - x @ s0) / (1 - pi) + x @ (s1 - s0) - tau
    psi_bar = float(psi.mean())
    imbalance = ((z - pi)[:, None] * x).mean(axis=0)
    delta = (b1 - s1) / pi + (b0 - s0) / (1 - pi)
    second = float(imbalance @ delta)
    quad = float(delta @ (x.T @ x / n) @ delta)
    return MseDecomposition(psi_bar, imbalance, delta, psi_bar * second, max(quad, 0.0), second)


def eta_squared(basis, beta_star1, beta_star0, sigma) -> float:
    """Share of the coefficient contrast, in the sigma norm, captured by span(basis)."""
    c = np.asarray(beta_star1, dtype=float) - np.asarray(beta_star0, dtype=float)
    s = np.asarray(sigma, dtype=float)
    b = np.asarray(basis, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    den = float(c @ s @ c)
    if den <= 0 or not np.any(c):
        raise ValueError("zero contrast: eta squared is undefined")
    proj = b @ np.linalg.solve(b.T @ s @ b, b.T @ s)
    pc = proj @ c
    return float(np.clip((pc @ s @ pc) / den, 0.0, 1.0))
