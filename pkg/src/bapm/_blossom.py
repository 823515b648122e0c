"""Dense maximum-weight perfect matching kernel (Edmonds' blossom method).

Primal-dual O(n^3) algorithm after Galil (1986) in the array formulation of
Van Rantwijk's ``mwmatching``, specialised to complete graphs given as an
integer weight matrix and always run in max-cardinality mode.  Integer
weights keep every dual update exact.

State lives in three tables so the numba functions can share it:

* ``B``  per-blossom scalars, shape (NROWS, 2n); ids < n are the trivial
  blossoms (single vertices), ids >= n are allocated on demand.
* ``C``  per-blossom lists (children, connecting edges, least-slack edges),
  shape (5, 2n, n).
* ``V``  per-vertex scalars: mate, top-level blossom, vertex dual.

The recursive helpers of the reference formulation (label propagation,
blossom expansion and augmentation) are written with explicit stacks.
"""

import numpy as np
from numba import njit

# B rows
_LABEL = 0  # 0 free, 1 S, 2 T; bit 4 is the scan breadcrumb
_LE_V = 1  # edge through which the label was obtained
_LE_W = 2
_PARENT = 3
_BASE = 4
_BE_V = 5  # least-slack edge
_BE_W = 6
_NCH = 7
_MBE_LEN = 8  # -1 when the blossom keeps no least-slack edge list
_DUAL = 9
_NROWS = 10

# C rows
_CHILD = 0
_EDGE_V = 1
_EDGE_W = 2
_MBE_V = 3
_MBE_W = 4

# V rows
_MATE = 0
_INB = 1
_VDUAL = 2


@njit(cache=True)
def _slack(G, V, v, w):
    return V[_VDUAL, v] + V[_VDUAL, w] - 2 * G[v, w]


@njit(cache=True)
def _wrap(j, k):
    if j < 0:
        return j + k
    return j


@njit(cache=True)
def _leaves(B, C, b, n):
    out = np.empty(n, np.int64)
    if b < n:
        out[0] = b
        return out[:1]
    stack = np.empty(2 * n, np.int64)
    sp = 0
    stack[sp] = b
    sp += 1
    cnt = 0
    while sp > 0:
        sp -= 1
        t = stack[sp]
        if t < n:
            out[cnt] = t
            cnt += 1
        else:
            for c in range(B[_NCH, t]):
                stack[sp] = C[_CHILD, t, c]
                sp += 1
    return out[:cnt]


@njit(cache=True)
def _push(Q, v):
    Q[Q[0] + 1] = v
    Q[0] += 1


@njit(cache=True)
def _assign_label(B, C, V, Q, w, t, v, n):
    while True:
        b = V[_INB, w]
        B[_LABEL, w] = t
        B[_LABEL, b] = t
        if v >= 0:
            B[_LE_V, w] = v
            B[_LE_W, w] = w
            B[_LE_V, b] = v
            B[_LE_W, b] = w
        else:
            B[_LE_V, w] = -1
            B[_LE_W, w] = -1
            B[_LE_V, b] = -1
            B[_LE_W, b] = -1
        B[_BE_V, w] = -1
        B[_BE_W, w] = -1
        B[_BE_V, b] = -1
        B[_BE_W, b] = -1
        if t == 1:
            if b >= n:
                lv = _leaves(B, C, b, n)
                for x in lv:
                    _push(Q, x)
            else:
                _push(Q, b)
            return
        # T-blossom: its base's mate becomes S
        base = B[_BASE, b]
        w = V[_MATE, base]
        t = 1
        v = base


@njit(cache=True)
def _scan_blossom(B, V, v, w, n):
    path = np.empty(2 * n, np.int64)
    plen = 0
    base = -1
    while v != -1:
        b = V[_INB, v]
        if B[_LABEL, b] & 4:
            base = B[_BASE, b]
            break
        path[plen] = b
        plen += 1
        B[_LABEL, b] = 5
        if B[_LE_V, b] == -1:
            v = -1
        else:
            v = B[_LE_V, b]
            b = V[_INB, v]
            v = B[_LE_V, b]
        if w != -1:
            tmp = v
            v = w
            w = tmp
    for i in range(plen):
        B[_LABEL, path[i]] = 1
    return base


@njit(cache=True)
def _add_blossom(G, B, C, V, Q, U, base, v, w, n):
    NB = 2 * n
    bb = V[_INB, base]
    bv = V[_INB, v]
    bw = V[_INB, w]
    U[0] -= 1
    b = U[U[0] + 1]
    B[_BASE, b] = base
    B[_PARENT, b] = -1
    B[_PARENT, bb] = b

    path = np.empty(n, np.int64)
    ev = np.empty(n, np.int64)
    ew = np.empty(n, np.int64)
    pc = 0
    ec = 0
    ev[ec] = v
    ew[ec] = w
    ec += 1
    while bv != bb:
        B[_PARENT, bv] = b
        path[pc] = bv
        pc += 1
        ev[ec] = B[_LE_V, bv]
        ew[ec] = B[_LE_W, bv]
        ec += 1
        v = B[_LE_V, bv]
        bv = V[_INB, v]
    path[pc] = bb
    pc += 1
    path[:pc] = path[:pc][::-1].copy()
    ev[:ec] = ev[:ec][::-1].copy()
    ew[:ec] = ew[:ec][::-1].copy()
    while bw != bb:
        B[_PARENT, bw] = b
        path[pc] = bw
        pc += 1
        ev[ec] = B[_LE_W, bw]
        ew[ec] = B[_LE_V, bw]
        ec += 1
        w = B[_LE_V, bw]
        bw = V[_INB, w]
    B[_NCH, b] = pc
    for i in range(pc):
        C[_CHILD, b, i] = path[i]
        C[_EDGE_V, b, i] = ev[i]
        C[_EDGE_W, b, i] = ew[i]

    B[_LABEL, b] = 1
    B[_LE_V, b] = B[_LE_V, bb]
    B[_LE_W, b] = B[_LE_W, bb]
    B[_DUAL, b] = 0

    lv = _leaves(B, C, b, n)
    for x in lv:
        if B[_LABEL, V[_INB, x]] == 2:
            _push(Q, x)
        V[_INB, x] = b

    # least-slack edges from the new blossom to every neighbouring S-blossom
    to_v = np.full(NB, -1, np.int64)
    to_w = np.full(NB, -1, np.int64)
    touched = np.empty(NB, np.int64)
    nt = 0
    for pi in range(pc):
        sub = path[pi]
        if sub >= n and B[_MBE_LEN, sub] >= 0:
            m = B[_MBE_LEN, sub]
            cand_v = C[_MBE_V, sub, :m].copy()
            cand_w = C[_MBE_W, sub, :m].copy()
            B[_MBE_LEN, sub] = -1
        else:
            sl = _leaves(B, C, sub, n)
            m = sl.shape[0] * (n - 1)
            cand_v = np.empty(m, np.int64)
            cand_w = np.empty(m, np.int64)
            m = 0
            for x in sl:
                for y in range(n):
                    if y != x:
                        cand_v[m] = x
                        cand_w[m] = y
                        m += 1
        for c in range(m):
            i = cand_v[c]
            j = cand_w[c]
            if V[_INB, j] == b:
                tmp = i
                i = j
                j = tmp
            bj = V[_INB, j]
            if bj != b and B[_LABEL, bj] == 1:
                if to_v[bj] == -1:
                    touched[nt] = bj
                    nt += 1
                    to_v[bj] = i
                    to_w[bj] = j
                elif _slack(G, V, i, j) < _slack(G, V, to_v[bj], to_w[bj]):
                    to_v[bj] = i
                    to_w[bj] = j
        B[_BE_V, sub] = -1
        B[_BE_W, sub] = -1
    B[_MBE_LEN, b] = nt
    best_v = -1
    best_w = -1
    best_s = 0
    for c in range(nt):
        bj = touched[c]
        C[_MBE_V, b, c] = to_v[bj]
        C[_MBE_W, b, c] = to_w[bj]
        s = _slack(G, V, to_v[bj], to_w[bj])
        if best_v == -1 or s < best_s:
            best_v = to_v[bj]
            best_w = to_w[bj]
            best_s = s
    B[_BE_V, b] = best_v
    B[_BE_W, b] = best_w


@njit(cache=True)
def _free_blossom(B, U, b):
    B[_LABEL, b] = 0
    B[_LE_V, b] = -1
    B[_LE_W, b] = -1
    B[_BE_V, b] = -1
    B[_BE_W, b] = -1
    B[_PARENT, b] = -1
    B[_BASE, b] = -1
    B[_NCH, b] = 0
    B[_MBE_LEN, b] = -1
    B[_DUAL, b] = 0
    U[U[0] + 1] = b
    U[0] += 1


@njit(cache=True)
def _expand_blossom(B, C, V, Q, U, A, b0, endstage, n):
    stack = np.empty(2 * n, np.int64)
    sp = 0
    stack[sp] = b0
    sp += 1
    while sp > 0:
        sp -= 1
        b = stack[sp]
        k = B[_NCH, b]
        for idx in range(k):
            s = C[_CHILD, b, idx]
            B[_PARENT, s] = -1
            if s >= n:
                if endstage and B[_DUAL, s] == 0:
                    stack[sp] = s
                    sp += 1
                else:
                    for x in _leaves(B, C, s, n):
                        V[_INB, x] = s
            else:
                V[_INB, s] = s
        if (not endstage) and B[_LABEL, b] == 2:
            entrychild = V[_INB, B[_LE_W, b]]
            j = 0
            for idx in range(k):
                if C[_CHILD, b, idx] == entrychild:
                    j = idx
                    break
            if j & 1:
                j -= k
                jstep = 1
            else:
                jstep = -1
            v = B[_LE_V, b]
            w = B[_LE_W, b]
            while j != 0:
                if jstep == 1:
                    p = C[_EDGE_V, b, _wrap(j, k)]
                    q = C[_EDGE_W, b, _wrap(j, k)]
                else:
                    q = C[_EDGE_V, b, _wrap(j - 1, k)]
                    p = C[_EDGE_W, b, _wrap(j - 1, k)]
                B[_LABEL, w] = 0
                B[_LABEL, q] = 0
                _assign_label(B, C, V, Q, w, 2, v, n)
                A[p, q] = True
                A[q, p] = True
                j += jstep
                if jstep == 1:
                    v = C[_EDGE_V, b, _wrap(j, k)]
                    w = C[_EDGE_W, b, _wrap(j, k)]
                else:
                    w = C[_EDGE_V, b, _wrap(j - 1, k)]
                    v = C[_EDGE_W, b, _wrap(j - 1, k)]
                A[v, w] = True
                A[w, v] = True
                j += jstep
            bw = C[_CHILD, b, _wrap(j, k)]
            B[_LABEL, w] = 2
            B[_LABEL, bw] = 2
            B[_LE_V, w] = v
            B[_LE_W, w] = w
            B[_LE_V, bw] = v
            B[_LE_W, bw] = w
            B[_BE_V, bw] = -1
            B[_BE_W, bw] = -1
            j += jstep
            while C[_CHILD, b, _wrap(j, k)] != entrychild:
                bv = C[_CHILD, b, _wrap(j, k)]
                if B[_LABEL, bv] == 1:
                    j += jstep
                    continue
                found = -1
                if bv >= n:
                    for x in _leaves(B, C, bv, n):
                        if B[_LABEL, x] != 0:
                            found = x
                            break
                elif B[_LABEL, bv] != 0:
                    found = bv
                if found != -1:
                    B[_LABEL, found] = 0
                    B[_LABEL, V[_MATE, B[_BASE, bv]]] = 0
                    _assign_label(B, C, V, Q, found, 2, B[_LE_V, found], n)
                j += jstep
        _free_blossom(B, U, b)


@njit(cache=True)
def _augment_blossom(B, C, V, b0, v0, n):
    sb = np.empty(4 * n, np.int64)
    sv = np.empty(4 * n, np.int64)
    sp = 0
    sb[sp] = b0
    sv[sp] = v0
    sp += 1
    while sp > 0:
        sp -= 1
        b = sb[sp]
        v = sv[sp]
        t = v
        while B[_PARENT, t] != b:
            t = B[_PARENT, t]
        if t >= n:
            sb[sp] = t
            sv[sp] = v
            sp += 1
        k = B[_NCH, b]
        i = 0
        for idx in range(k):
            if C[_CHILD, b, idx] == t:
                i = idx
                break
        j = i
        if i & 1:
            j -= k
            jstep = 1
        else:
            jstep = -1
        while j != 0:
            j += jstep
            t = C[_CHILD, b, _wrap(j, k)]
            if jstep == 1:
                w = C[_EDGE_V, b, _wrap(j, k)]
                x = C[_EDGE_W, b, _wrap(j, k)]
            else:
                x = C[_EDGE_V, b, _wrap(j - 1, k)]
                w = C[_EDGE_W, b, _wrap(j - 1, k)]
            if t >= n:
                sb[sp] = t
                sv[sp] = w
                sp += 1
            j += jstep
            t = C[_CHILD, b, _wrap(j, k)]
            if t >= n:
                sb[sp] = t
                sv[sp] = x
                sp += 1
            V[_MATE, w] = x
            V[_MATE, x] = w
        # rotate so the new base comes first
        ch = C[_CHILD, b, :k].copy()
        e1 = C[_EDGE_V, b, :k].copy()
        e2 = C[_EDGE_W, b, :k].copy()
        for idx in range(k):
            src = (idx + i) % k
            C[_CHILD, b, idx] = ch[src]
            C[_EDGE_V, b, idx] = e1[src]
            C[_EDGE_W, b, idx] = e2[src]
        # sub-blossom augmentation is deferred; its base ends up at v
        B[_BASE, b] = v


@njit(cache=True)
def _augment_matching(B, C, V, v, w, n):
    for side in range(2):
        if side == 0:
            s = v
            j = w
        else:
            s = w
            j = v
        while True:
            bs = V[_INB, s]
            if bs >= n:
                _augment_blossom(B, C, V, bs, s, n)
            V[_MATE, s] = j
            if B[_LE_V, bs] == -1:
                break
            t = B[_LE_V, bs]
            bt = V[_INB, t]
            s = B[_LE_V, bt]
            j = B[_LE_W, bt]
            if bt >= n:
                _augment_blossom(B, C, V, bt, j, n)
            V[_MATE, j] = s


@njit(cache=True)
def max_weight_perfect_matching(G):
    """Return ``mate`` for a maximum-weight maximum-cardinality matching.

    ``G`` is a symmetric int64 matrix of a complete graph; the diagonal is
    ignored.
    """
    n = G.shape[0]
    NB = 2 * n
    mate_out = np.full(n, -1, np.int64)
    if n < 2:
        return mate_out
    maxweight = G[0, 1]
    for i in range(n):
        for j in range(i + 1, n):
            if G[i, j] > maxweight:
                maxweight = G[i, j]
    if maxweight < 0:
        maxweight = 0

    B = np.full((_NROWS, NB), -1, np.int64)
    B[_LABEL, :] = 0
    B[_NCH, :] = 0
    B[_DUAL, :] = 0
    for v in range(n):
        B[_BASE, v] = v
    C = np.full((5, NB, n), -1, np.int64)
    V = np.empty((3, n), np.int64)
    for v in range(n):
        V[_MATE, v] = -1
        V[_INB, v] = v
        V[_VDUAL, v] = maxweight
    A = np.zeros((n, n), np.bool_)
    Q = np.zeros(4 * n + 2, np.int64)
    U = np.zeros(n + 1, np.int64)
    for b in range(n, NB):
        U[U[0] + 1] = NB - 1 - (b - n)
        U[0] += 1

    while True:
        # stage
        for b in range(NB):
            B[_LABEL, b] = 0
            B[_LE_V, b] = -1
            B[_LE_W, b] = -1
            B[_BE_V, b] = -1
            B[_BE_W, b] = -1
            if b >= n:
                B[_MBE_LEN, b] = -1
        A[:, :] = False
        Q[0] = 0
        for v in range(n):
            if V[_MATE, v] == -1 and B[_LABEL, V[_INB, v]] == 0:
                _assign_label(B, C, V, Q, v, 1, -1, n)

        augmented = False
        while True:
            # substage
            while Q[0] > 0 and not augmented:
                v = Q[Q[0]]
                Q[0] -= 1
                for w in range(n):
                    if w == v:
                        continue
                    bv = V[_INB, v]
                    bw = V[_INB, w]
                    if bv == bw:
                        continue
                    kslack = 0
                    if not A[v, w]:
                        kslack = _slack(G, V, v, w)
                        if kslack <= 0:
                            A[v, w] = True
                            A[w, v] = True
                    if A[v, w]:
                        if B[_LABEL, bw] == 0:
                            _assign_label(B, C, V, Q, w, 2, v, n)
                        elif B[_LABEL, bw] == 1:
                            base = _scan_blossom(B, V, v, w, n)
                            if base != -1:
                                _add_blossom(G, B, C, V, Q, U, base, v, w, n)
                            else:
                                _augment_matching(B, C, V, v, w, n)
                                augmented = True
                                break
                        elif B[_LABEL, w] == 0:
                            B[_LABEL, w] = 2
                            B[_LE_V, w] = v
                            B[_LE_W, w] = w
                    elif B[_LABEL, bw] == 1:
                        if B[_BE_V, bv] == -1 or kslack < _slack(
                            G, V, B[_BE_V, bv], B[_BE_W, bv]
                        ):
                            B[_BE_V, bv] = v
                            B[_BE_W, bv] = w
                    elif B[_LABEL, w] == 0:
                        if B[_BE_V, w] == -1 or kslack < _slack(
                            G, V, B[_BE_V, w], B[_BE_W, w]
                        ):
                            B[_BE_V, w] = v
                            B[_BE_W, w] = w

            if augmented:
                break

            deltatype = -1
            delta = 0
            dv = -1
            dw = -1
            dblossom = -1
            for v in range(n):
                if B[_LABEL, V[_INB, v]] == 0 and B[_BE_V, v] != -1:
                    d = _slack(G, V, B[_BE_V, v], B[_BE_W, v])
                    if deltatype == -1 or d < delta:
                        delta = d
                        deltatype = 2
                        dv = B[_BE_V, v]
                        dw = B[_BE_W, v]
            for b in range(NB):
                if b >= n and B[_BASE, b] == -1:
                    continue
                if B[_PARENT, b] == -1 and B[_LABEL, b] == 1 and B[_BE_V, b] != -1:
                    d = _slack(G, V, B[_BE_V, b], B[_BE_W, b]) // 2
                    if deltatype == -1 or d < delta:
                        delta = d
                        deltatype = 3
                        dv = B[_BE_V, b]
                        dw = B[_BE_W, b]
            for b in range(n, NB):
                if (
                    B[_BASE, b] != -1
                    and B[_PARENT, b] == -1
                    and B[_LABEL, b] == 2
                    and (deltatype == -1 or B[_DUAL, b] < delta)
                ):
                    delta = B[_DUAL, b]
                    deltatype = 4
                    dblossom = b
            if deltatype == -1:
                deltatype = 1
                delta = V[_VDUAL, 0]
                for v in range(n):
                    if V[_VDUAL, v] < delta:
                        delta = V[_VDUAL, v]
                if delta < 0:
                    delta = 0

            for v in range(n):
                lab = B[_LABEL, V[_INB, v]]
                if lab == 1:
                    V[_VDUAL, v] -= delta
                elif lab == 2:
                    V[_VDUAL, v] += delta
            for b in range(n, NB):
                if B[_BASE, b] != -1 and B[_PARENT, b] == -1:
                    if B[_LABEL, b] == 1:
                        B[_DUAL, b] += delta
                    elif B[_LABEL, b] == 2:
                        B[_DUAL, b] -= delta

            if deltatype == 1:
                break
            elif deltatype == 2 or deltatype == 3:
                A[dv, dw] = True
                A[dw, dv] = True
                _push(Q, dv)
            else:
                _expand_blossom(B, C, V, Q, U, A, dblossom, False, n)

        if not augmented:
            break
        for b in range(n, NB):
            if (
                B[_BASE, b] != -1
                and B[_PARENT, b] == -1
                and B[_LABEL, b] == 1
                and B[_DUAL, b] == 0
            ):
                _expand_blossom(B, C, V, Q, U, A, b, True, n)

    for v in range(n):
        mate_out[v] = V[_MATE, v]
    return mate_out
