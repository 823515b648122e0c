"""Distances between units, exact minimum-weight perfect matching, pair ordering
and pairing-quality diagnostics.

The solver quantizes a real distance matrix onto an int64 grid and hands it to
the blossom kernel in :mod:`bapm._blossom`.  Integer weights keep the
primal-dual updates exact, so the returned pairing is a true optimum of the
quantized problem, which differs from the real problem by at most
``n/2 * scale / grid`` in total weight (about 1e-11 relative at n = 200).
A small index-based term below the grid resolution breaks ties reproducibly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bapm._blossom import max_weight_perfect_matching
from bapm.core import PairedOrder, Pairing, Sample

RIDGE_EPS = 1e-8
_INT_BUDGET = 2**56


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative distances; entries >= ``forbidden_value`` are disallowed pairs."""

    d: np.ndarray
    forbidden_value: float | None = None

    def __post_init__(self) -> None:
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.all(np.isfinite(d)):
            raise ValueError("distance matrix entries must be finite; use the forbidden sentinel")
        if np.any(d < 0):
            raise ValueError("distances must be nonnegative")
        if not np.allclose(d, d.T, rtol=1e-12, atol=0.0):
            raise ValueError("distance matrix must be symmetric")
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.d.shape[0]

    def forbidden_mask(self) -> np.ndarray:
        if self.forbidden_value is None:
            return np.zeros(self.d.shape, dtype=bool)
        return self.d >= self.forbidden_value

    def finite_max(self) -> float:
        vals = self.d[~self.forbidden_mask()]
        return float(vals.max()) if vals.size else 0.0

    def total(self, pairing: Pairing) -> float:
        """Total weight of a pairing over this matrix."""
        return float(sum(self.d[a, b] for a, b in pairing))


@dataclass(frozen=True)
class PairingDiagnostics:
    within_pair_L1: float
    within_pair_L2sq: float
    cross_pair_L2sq: tuple[float, float, float, float]


def regularized_covariance(x: np.ndarray) -> np.ndarray:
    """Sample covariance plus ridge ``eps * trace / k`` on the diagonal."""
    x = np.asarray(x, dtype=float)
    k = x.shape[1]
    sigma = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    tr = float(np.trace(sigma))
    ridge = RIDGE_EPS * tr / k if tr > 0 else RIDGE_EPS
    return sigma + ridge * np.eye(k)


def _whitener(sigma: np.ndarray, names: str = "column") -> np.ndarray:
    """Return R^{-1} where sigma = R R^T, so ||R^{-1} v||^2 = v^T sigma^{-1} v."""
    try:
        r = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        diag = np.diag(sigma)
        bad = [int(i) for i in np.flatnonzero(diag <= RIDGE_EPS * max(diag.max(), 1.0))]
        if not bad:
            # collinear set: report columns involved in the smallest eigenvector
            vals, vecs = np.linalg.eigh(sigma)
            bad = [int(i) for i in np.flatnonzero(np.abs(vecs[:, 0]) > 1e-6)]
        raise ValueError(f"covariance is singular after regularization; offending {names}s: {bad}")
    return np.linalg.inv(r)


def _pairwise_euclidean(u: np.ndarray) -> np.ndarray:
    sq = np.sum(u * u, axis=1)
    g = sq[:, None] + sq[None, :] - 2.0 * (u @ u.T)
    np.maximum(g, 0.0, out=g)
    # the Gram expansion loses precision for near-identical points; redo small entries exactly
    small = g < 1e-8 * (sq[:, None] + sq[None, :] + 1e-300)
    if np.any(small):
        ii, jj = np.nonzero(small)
        diff = u[ii] - u[jj]
        g[ii, jj] = np.sum(diff * diff, axis=1)
    np.fill_diagonal(g, 0.0)
    d = np.sqrt(g)
    return 0.5 * (d + d.T)


def mahalanobis_coordinates(covariates: np.ndarray) -> np.ndarray:
    """Covariates mapped so Euclidean distance equals Mahalanobis distance."""
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    winv = _whitener(regularized_covariance(x))
    return (x - x.mean(axis=0)) @ winv.T


def mahalanobis_distances(sample: Sample | np.ndarray) -> DistanceMatrix:
    x = sample.covariates if isinstance(sample, Sample) else np.asarray(sample, dtype=float)
    return DistanceMatrix(_pairwise_euclidean(mahalanobis_coordinates(x)))


def _as_pred_matrix(preds) -> np.ndarray:
    if hasattr(preds, "matrix"):
        return preds.matrix()
    y = np.asarray(preds, dtype=float)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError("predictions must be an n x 2 matrix of (yhat1, yhat0)")
    return y


def weighted_prediction_coordinates(preds, W, S) -> np.ndarray:
    """Rows R^{-1} W yhat_i with S = R R^T, so Euclidean distance reproduces the weighted metric."""
    y = _as_pred_matrix(preds)
    w = np.asarray(getattr(W, "w", W), dtype=float)
    if w.ndim == 2:
        w = np.diag(w)
    if w.shape != (2,) or not np.all(np.isfinite(w)):
        raise ValueError("accuracy weights must be a pair of finite reals")
    if np.any(w < 0):
        raise ValueError(f"accuracy weights must be nonnegative, got {w.tolist()}")
    s = np.asarray(getattr(S, "S", S), dtype=float)
    if s.shape != (2, 2):
        raise ValueError("prediction covariance must be 2 x 2")
    rinv = _whitener(0.5 * (s + s.T), names="prediction column")
    return (y * w) @ rinv.T


def weighted_po_distances(preds, W, S) -> DistanceMatrix:
    """Accuracy-weighted distance between predicted potential-outcome vectors.

    d_ij = sqrt((yhat_i - yhat_j)^T W S^{-1} W (yhat_i - yhat_j)) with W = diag(w).
    """
    return DistanceMatrix(_pairwise_euclidean(weighted_prediction_coordinates(preds, W, S)))


def penalized_ols_distance(x1, x2, beta, beta_cov) -> float:
    """Squared fitted-value gap plus the coefficient-uncertainty penalty."""
    x1, x2, beta = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (x1, x2, beta))
    cov = np.atleast_2d(np.asarray(beta_cov, dtype=float))
    k = beta.shape[0]
    if x1.shape != (k,) or x2.shape != (k,) or cov.shape != (k, k):
        raise ValueError(
            f"dimension mismatch: x1 {x1.shape}, x2 {x2.shape}, beta {beta.shape}, cov {cov.shape}"
        )
    diff = x1 - x2
    return float((diff @ beta) ** 2 + max(diff @ cov @ diff, 0.0))


def penalized_ols_distances(x: np.ndarray, beta, beta_cov) -> DistanceMatrix:
    """Matrix form of :func:`penalized_ols_distance` over all unit pairs."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    cov = np.atleast_2d(np.asarray(beta_cov, dtype=float))
    if x.shape[1] != beta.shape[0] or cov.shape != (beta.shape[0],) * 2:
        raise ValueError("dimension mismatch between covariates, beta and beta_cov")
    fit = x @ beta
    diff = x[:, None, :] - x[None, :, :]
    quad = np.einsum("ijk,kl,ijl->ij", diff, 0.5 * (cov + cov.T), diff)
    d = (fit[:, None] - fit[None, :]) ** 2 + np.maximum(quad, 0.0)
    return DistanceMatrix(0.5 * (d + d.T))


def quantization_step(dm: DistanceMatrix) -> float:
    """Largest per-edge rounding error of the solver's integer grid."""
    n = dm.n
    scale = dm.finite_max()
    if scale <= 0:
        return 0.0
    k = n * n // 4 + 1
    grid = _INT_BUDGET // ((n // 2 + 1) * k) - 1
    return scale / grid


def _integer_weights(dm: DistanceMatrix) -> np.ndarray:
    n = dm.n
    n_pairs = n // 2
    k = n * n // 4 + 1  # exceeds any matching's total index perturbation
    grid = _INT_BUDGET // ((n_pairs + 1) * k) - 1
    mask = dm.forbidden_mask()
    scale = dm.finite_max()
    idx = np.arange(n)
    tie = np.abs(idx[:, None] - idx[None, :]).astype(np.int64)
    if scale > 0:
        level = np.rint(np.where(mask, 0.0, dm.d) / scale * grid).astype(np.int64)
    else:
        level = np.zeros((n, n), dtype=np.int64)
    q = level * k + tie
    # a single forbidden edge outweighs any sentinel-free matching
    q[mask] = (n_pairs + 1) * (grid + 1) * k
    np.fill_diagonal(q, 0)
    return q


def min_weight_perfect_matching(dm: DistanceMatrix | np.ndarray) -> Pairing:
    """Exact minimum-weight perfect matching on the complete graph of ``dm``.

    Among equal-weight optima the one with the smallest total index gap
    sum |i - j| is returned; remaining ties are resolved by the kernel's
    deterministic scan order.
    """
    if not isinstance(dm, DistanceMatrix):
        dm = DistanceMatrix(dm)
    n = dm.n
    if n % 2:
        raise ValueError(f"perfect matching needs an even number of units, got {n}")
    if n == 0:
        return Pairing(())
    if n == 2:
        return Pairing(((0, 1),))
    q = _integer_weights(dm)
    mate = max_weight_perfect_matching(q.max() + 1 - q)
    return Pairing.from_mates(mate)


def forbid_same_arm_batch1(dm: DistanceMatrix, sample: Sample, z1: np.ndarray) -> DistanceMatrix:
    """Mark batch-1 pairs sharing an arm with the sentinel ``1e6 * (max finite + 1)``.

    ``z1`` is a length-n vector whose batch-1 entries hold the realized
    assignments; batch-2 entries are ignored.
    """
    if sample.batch is None:
        raise ValueError("sample carries no batch labels")
    z1 = np.asarray(z1)
    if z1.shape != (dm.n,):
        raise ValueError("z1 must be a length-n vector")
    b1 = np.flatnonzero(sample.batch == 1)
    sentinel = 1e6 * (dm.finite_max() + 1.0)
    d = np.array(dm.d)
    zb = z1[b1]
    same = zb[:, None] == zb[None, :]
    np.fill_diagonal(same, False)
    ii, jj = np.nonzero(same)
    d[b1[ii], b1[jj]] = sentinel
    return DistanceMatrix(d, forbidden_value=sentinel)


def order_pairs_for_inference(pairing: Pairing, pair_scores, z: np.ndarray | None = None) -> PairedOrder:
    """Sort pairs ascending by score, ties by smallest member; treated unit first when ``z`` is given."""
    scores = np.asarray(pair_scores, dtype=float)
    pairs = pairing.pairs
    if scores.shape != (len(pairs),):
        raise ValueError(f"expected {len(pairs)} pair scores, got {scores.shape}")
    first = np.array([p[0] for p in pairs])
    order = np.lexsort((first, scores))
    out = []
    for m in order:
        a, b = pairs[m]
        if z is not None:
            if int(z[a]) + int(z[b]) != 1:
                raise ValueError(f"pair ({a}, {b}) does not hold exactly one treated unit")
            if z[b] == 1:
                a, b = b, a
        out.append((int(a), int(b)))
    return PairedOrder(tuple(out))


def pair_scores_from_unit_scores(pairing: Pairing, unit_scores) -> np.ndarray:
    s = np.asarray(unit_scores, dtype=float)
    return np.array([(s[a] + s[b]) / 2.0 for a, b in pairing])


def pairing_diagnostics(sample: Sample | np.ndarray, ordered: PairedOrder) -> PairingDiagnostics:
    """Within-pair and adjacent pair-of-pairs covariate distances (Euclidean norm).

    Sums are normalized by the number of pairs.
    """
    x = sample.covariates if isinstance(sample, Sample) else np.asarray(sample, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    flat = ordered.flat()
    if sorted(flat.tolist()) != list(range(x.shape[0])):
        raise ValueError("ordered pairs must cover the sample")
    n_pairs = len(ordered)
    xp = x[flat]
    within = np.linalg.norm(xp[1::2] - xp[0::2], axis=1)
    n_quads = n_pairs // 2
    q = xp[: 4 * n_quads].reshape(n_quads, 4, -1)
    cross = []
    # positions 4j-k and 4j-l with k in {2,3}, l in {0,1}, as 0-based offsets inside the quad
    for k in (2, 3):
        for l in (0, 1):
            diff = q[:, 3 - k] - q[:, 3 - l]
            cross.append(float(np.sum(diff * diff) / n_pairs))
    return PairingDiagnostics(
        within_pair_L1=float(within.sum() / n_pairs),
        within_pair_L2sq=float(np.sum(within**2) / n_pairs),
        cross_pair_L2sq=tuple(cross),
    )
