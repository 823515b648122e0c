"""Squared-error gradient boosting over depth-limited regression trees.

Trees are stored in complete-binary layout (children of node i at 2i+1 and
2i+2), one row per tree.  A node whose feature is -1 is a leaf.  Split search
scans every feature in ascending order and every midpoint threshold in
ascending order, keeping a candidate only on strictly larger gain, so ties go
to the lowest feature index and then the lowest threshold.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _best_split(x, order, resid, member, node, min_leaf):
    n, k = x.shape
    tot = 0.0
    cnt = 0
    for i in range(n):
        if member[i] == node:
            tot += resid[i]
            cnt += 1
    best_gain = tot * tot / cnt if cnt > 0 else 0.0
    base = best_gain
    best_f = -1
    best_t = 0.0
    if cnt < 2 * min_leaf:
        return best_f, best_t, 0.0
    for f in range(k):
        sl = 0.0
        nl = 0
        prev = 0.0
        for r in range(n):
            i = order[r, f]
            if member[i] != node:
                continue
            xi = x[i, f]
            if nl >= min_leaf and cnt - nl >= min_leaf and xi > prev:
                sr = tot - sl
                g = sl * sl / nl + sr * sr / (cnt - nl)
                if g > best_gain * (1.0 + 1e-12) + 1e-300:
                    best_gain = g
                    best_f = f
                    best_t = 0.5 * (prev + xi)
            sl += resid[i]
            nl += 1
            prev = xi
    return best_f, best_t, best_gain - base


@njit(cache=True)
def boost_fit(x, y, n_trees, max_depth, learning_rate, min_leaf, row_draws, subsample):
    n, k = x.shape
    n_nodes = 2 ** (max_depth + 1) - 1
    feat = -np.ones((n_trees, n_nodes), dtype=np.int64)
    thr = np.zeros((n_trees, n_nodes))
    val = np.zeros((n_trees, n_nodes))
    init = y.mean()
    pred = np.full(n, init)
    order = np.empty((n, k), dtype=np.int64)
    for f in range(k):
        order[:, f] = np.argsort(x[:, f], kind="mergesort")
    member = np.empty(n, dtype=np.int64)
    resid = np.empty(n)
    loss = np.empty(n_trees + 1)
    loss[0] = np.mean((y - pred) ** 2)
    for t in range(n_trees):
        for i in range(n):
            resid[i] = y[i] - pred[i]
            if subsample < 1.0 and row_draws[t, i] >= subsample:
                member[i] = -1
            else:
                member[i] = 0
        # grow level by level
        for node in range(n_nodes):
            depth = 0
            m = node + 1
            while m > 1:
                m //= 2
                depth += 1
            cnt = 0
            for i in range(n):
                if member[i] == node:
                    cnt += 1
            if cnt == 0:
                continue
            f = -1
            tv = 0.0
            if depth < max_depth:
                f, tv, gain = _best_split(x, order, resid, member, node, min_leaf)
            if f >= 0:
                feat[t, node] = f
                thr[t, node] = tv
                for i in range(n):
                    if member[i] == node:
                        member[i] = 2 * node + 1 if x[i, f] <= tv else 2 * node + 2
            else:
                s = 0.0
                for i in range(n):
                    if member[i] == node:
                        s += resid[i]
                val[t, node] = learning_rate * s / cnt
        # update every training row, including rows left out by subsampling
        for i in range(n):
            node = 0
            while feat[t, node] >= 0:
                node = 2 * node + 1 if x[i, feat[t, node]] <= thr[t, node] else 2 * node + 2
            pred[i] += val[t, node]
        loss[t + 1] = np.mean((y - pred) ** 2)
    return init, feat, thr, val, loss


@njit(cache=True)
def boost_predict(x, init, feat, thr, val):
    n = x.shape[0]
    out = np.full(n, init)
    for t in range(feat.shape[0]):
        for i in range(n):
            node = 0
            while feat[t, node] >= 0:
                node = 2 * node + 1 if x[i, feat[t, node]] <= thr[t, node] else 2 * node + 2
            out[i] += val[t, node]
    return out


@njit(cache=True)
def staged_sse(x, y, init, feat, thr, val):
    """Squared error after 0, 1, ..., T stages."""
    n = x.shape[0]
    t_max = feat.shape[0]
    pred = np.full(n, init)
    out = np.empty(t_max + 1)
    out[0] = np.sum((y - pred) ** 2)
    for t in range(t_max):
        for i in range(n):
            node = 0
            while feat[t, node] >= 0:
                node = 2 * node + 1 if x[i, feat[t, node]] <= thr[t, node] else 2 * node + 2
            pred[i] += val[t, node]
        out[t + 1] = np.sum((y - pred) ** 2)
    return out


@njit(cache=True)
def cv_stages(x, y, n_trees, max_depth, learning_rate, min_leaf, folds):
    """Stage count in 0..n_trees minimizing K-fold validation error; rows go to fold i % K."""
    n = x.shape[0]
    k = min(folds, n)
    total = np.zeros(n_trees + 1)
    dummy = np.zeros((1, 1))
    for f in range(k):
        n_val = 0
        for i in range(n):
            if i % k == f:
                n_val += 1
        if n_val == 0 or n - n_val < 2:
            continue
        tr = np.empty(n - n_val, dtype=np.int64)
        va = np.empty(n_val, dtype=np.int64)
        a = 0
        b = 0
        for i in range(n):
            if i % k == f:
                va[b] = i
                b += 1
            else:
                tr[a] = i
                a += 1
        init, feat, thr, val, _ = boost_fit(
            x[tr], y[tr], n_trees, max_depth, learning_rate, min_leaf, dummy, 1.0
        )
        total += staged_sse(x[va], y[va], init, feat, thr, val)
    best = 0
    for t in range(1, n_trees + 1):
        if total[t] < total[best] * (1.0 - 1e-12):
            best = t
    return best


@njit(cache=True)
def boost_fit_cv(x, y, n_trees, max_depth, learning_rate, min_leaf, folds):
    dummy = np.zeros((1, 1))
    t = n_trees
    if folds >= 2:
        t = cv_stages(x, y, n_trees, max_depth, learning_rate, min_leaf, folds)
    return boost_fit(x, y, t, max_depth, learning_rate, min_leaf, dummy, 1.0)


@njit(cache=True)
def boost_loo(x, y, n_trees, max_depth, learning_rate, min_leaf, folds):
    """Prediction for each row from a model trained on all other rows."""
    n = x.shape[0]
    out = np.empty(n)
    keep = np.empty(n - 1, dtype=np.int64)
    for i in range(n):
        c = 0
        for j in range(n):
            if j != i:
                keep[c] = j
                c += 1
        init, feat, thr, val, _ = boost_fit_cv(
            x[keep], y[keep], n_trees, max_depth, learning_rate, min_leaf, folds
        )
        out[i] = boost_predict(x[i : i + 1], init, feat, thr, val)[0]
    return out
