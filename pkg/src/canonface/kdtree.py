"""Exact 3-D KD-tree for nearest-neighbour queries.

Construction splits each node on its widest bounding-box axis at the median
and stops at ``leaf_size`` points. Queries are exact: at equal squared
distance the lowest original point index wins, so the answer is unique and
independent of traversal order or thread schedule.

Queries run bottom-up: start at a leaf, scan it, then climb towards the
root, searching sibling subtrees whose bounding box may still hold a
closer point and stopping as soon as the current best ball lies strictly
inside the cell. Grid queries are answered row by row; each query starts
at the leaf holding the previous pixel's answer and uses that point's
distance as its initial bound. Other queries descend from the
root to the leaf whose cell holds the query. Climbing is exact from any
starting leaf, because each step has fully searched the subtree below it.

Both pruning tests compare squared coordinate gaps computed in the same
order as point distances. Floating-point subtraction, squaring and addition
are monotone, so a pruned region can never hold a point at a computed
distance <= the current best; equal-distance candidates are always visited
and the index tie rule stays exact.
"""

import numpy as np
from numba import njit, prange

LEAF_SIZE = 16


@njit(cache=True, inline="always")
def _swap(perm, wp, i, j):
    t = perm[i]
    perm[i] = perm[j]
    perm[j] = t
    for a in range(3):
        v = wp[i, a]
        wp[i, a] = wp[j, a]
        wp[j, a] = v


@njit(cache=True, inline="always")
def _less(wp, perm, i, j, axis):
    return wp[i, axis] < wp[j, axis] or (wp[i, axis] == wp[j, axis] and perm[i] < perm[j])


@njit(cache=True, inline="always")
def _select(perm, wp, lo, hi, k, axis):
    # quickselect on (coordinate, original index) so the split is deterministic
    while hi - lo > 1:
        mid = (lo + hi) // 2
        last = hi - 1
        # median of three into position `last`
        if _less(wp, perm, mid, lo, axis):
            _swap(perm, wp, mid, lo)
        if _less(wp, perm, last, lo, axis):
            _swap(perm, wp, last, lo)
        if _less(wp, perm, mid, last, axis):
            _swap(perm, wp, mid, last)
        pv = wp[last, axis]
        pi = perm[last]
        store = lo
        for i in range(lo, last):
            v = wp[i, axis]
            if v < pv or (v == pv and perm[i] < pi):
                if i != store:
                    _swap(perm, wp, i, store)
                store += 1
        _swap(perm, wp, last, store)
        if store == k:
            return
        if k < store:
            hi = store
        else:
            lo = store + 1


@njit(cache=True)
def _build(pts, leaf_size):
    n = pts.shape[0]
    perm = np.arange(n)
    wp = pts.copy()
    cap = 2 * (n // max(leaf_size // 2, 1) + 1) + 1
    start = np.empty(cap, np.int64)
    stop = np.empty(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    parent = np.full(cap, -1, np.int64)
    split_axis = np.zeros(cap, np.int64)
    split_val = np.zeros(cap, np.float64)
    blo = np.empty((cap, 3), np.float64)
    bhi = np.empty((cap, 3), np.float64)
    clo = np.empty((cap, 3), np.float64)
    chi = np.empty((cap, 3), np.float64)
    stack = np.empty(cap, np.int64)
    for a in range(3):
        clo[0, a] = -np.inf
        chi[0, a] = np.inf
    start[0] = 0
    stop[0] = n
    n_nodes = 1
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = stop[node]
        lo0 = lo1 = lo2 = np.inf
        hi0 = hi1 = hi2 = -np.inf
        for i in range(s, e):
            v0 = wp[i, 0]
            v1 = wp[i, 1]
            v2 = wp[i, 2]
            lo0 = min(lo0, v0)
            hi0 = max(hi0, v0)
            lo1 = min(lo1, v1)
            hi1 = max(hi1, v1)
            lo2 = min(lo2, v2)
            hi2 = max(hi2, v2)
        blo[node, 0] = lo0
        blo[node, 1] = lo1
        blo[node, 2] = lo2
        bhi[node, 0] = hi0
        bhi[node, 1] = hi1
        bhi[node, 2] = hi2
        if e - s <= leaf_size:
            continue
        axis = 0
        ext = bhi[node, 0] - blo[node, 0]
        for a in range(1, 3):
            if bhi[node, a] - blo[node, a] > ext:
                ext = bhi[node, a] - blo[node, a]
                axis = a
        mid = (s + e) // 2
        _select(perm, wp, s, e, mid, axis)
        sv = wp[mid, axis]
        l = n_nodes
        r = n_nodes + 1
        n_nodes += 2
        split_axis[node] = axis
        split_val[node] = sv
        left[node] = l
        start[l] = s
        stop[l] = mid
        start[r] = mid
        stop[r] = e
        parent[l] = node
        parent[r] = node
        for a in range(3):
            clo[l, a] = clo[node, a]
            chi[l, a] = chi[node, a]
            clo[r, a] = clo[node, a]
            chi[r, a] = chi[node, a]
        chi[l, axis] = sv
        clo[r, axis] = sv
        stack[sp] = l
        stack[sp + 1] = r
        sp += 2
    m = n_nodes
    leaf_of = np.empty(n, np.int64)
    for node in range(m):
        if left[node] < 0:
            for i in range(start[node], stop[node]):
                leaf_of[i] = node
    return (perm, wp, start[:m].copy(), stop[:m].copy(), left[:m].copy(), parent[:m].copy(),
            split_axis[:m].copy(), split_val[:m].copy(), blo[:m].copy(), bhi[:m].copy(),
            clo[:m].copy(), chi[:m].copy(), leaf_of)


@njit(cache=True, inline="always")
def _box_d2(q0, q1, q2, blo, bhi, node):
    d = 0.0
    if q0 < blo[node, 0]:
        t = blo[node, 0] - q0
        d += t * t
    elif q0 > bhi[node, 0]:
        t = q0 - bhi[node, 0]
        d += t * t
    if q1 < blo[node, 1]:
        t = blo[node, 1] - q1
        d += t * t
    elif q1 > bhi[node, 1]:
        t = q1 - bhi[node, 1]
        d += t * t
    if q2 < blo[node, 2]:
        t = blo[node, 2] - q2
        d += t * t
    elif q2 > bhi[node, 2]:
        t = q2 - bhi[node, 2]
        d += t * t
    return d


@njit(cache=True, inline="always")
def _ball_inside(q, best, clo, chi, node):
    for a in range(3):
        t = q[a] - clo[node, a]
        if not t * t > best:
            return False
        t = chi[node, a] - q[a]
        if not t * t > best:
            return False
    return True


@njit(cache=True, inline="always")
def _scan_leaf(q0, q1, q2, tp, perm, s, e, best, best_idx, best_pos):
    for i in range(s, e):
        d0 = tp[i, 0] - q0
        d1 = tp[i, 1] - q1
        d2 = tp[i, 2] - q2
        d = d0 * d0 + d1 * d1 + d2 * d2
        if d < best or (d == best and perm[i] < best_idx):
            best = d
            best_idx = perm[i]
            best_pos = i
    return best, best_idx, best_pos


@njit(cache=True, inline="always")
def _query_one(q, hint, tp, perm, start, stop, left, parent, split_axis, split_val,
               blo, bhi, clo, chi, leaf_of, stack):
    q0 = q[0]
    q1 = q[1]
    q2 = q[2]
    best = np.inf
    best_idx = -1
    best_pos = -1
    if hint >= 0:
        # any real point bounds the answer without changing it
        d0 = tp[hint, 0] - q0
        d1 = tp[hint, 1] - q1
        d2 = tp[hint, 2] - q2
        best = d0 * d0 + d1 * d1 + d2 * d2
        best_idx = perm[hint]
        best_pos = hint
    if hint >= 0:
        node = leaf_of[hint]
    else:
        node = 0
        while left[node] >= 0:
            if q[split_axis[node]] < split_val[node]:
                node = left[node]
            else:
                node = left[node] + 1
    best, best_idx, best_pos = _scan_leaf(q0, q1, q2, tp, perm, start[node], stop[node],
                                          best, best_idx, best_pos)
    while node != 0:
        if _ball_inside(q, best, clo, chi, node):
            break
        par = parent[node]
        sib = left[par]
        if sib == node:
            sib = sib + 1
        if _box_d2(q0, q1, q2, blo, bhi, sib) <= best:
            stack[0] = sib
            sp = 1
            while sp > 0:
                sp -= 1
                n = stack[sp]
                if _box_d2(q0, q1, q2, blo, bhi, n) > best:
                    continue
                l = left[n]
                if l < 0:
                    best, best_idx, best_pos = _scan_leaf(q0, q1, q2, tp, perm, start[n],
                                                          stop[n], best, best_idx, best_pos)
                    continue
                # push the far child first so the near one is searched first
                if q[split_axis[n]] < split_val[n]:
                    stack[sp] = l + 1
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = l + 1
                sp += 2
        node = par
    return best_idx, best, best_pos


@njit(cache=True, parallel=True)
def _query_rows(queries, valid, perm, tp, start, stop, left, parent, split_axis, split_val,
                blo, bhi, clo, chi, leaf_of, out_idx, out_d2):
    # the warm-start hint only chains within a row, so results cannot depend
    # on how rows are spread over threads
    n_rows = queries.shape[0]
    n_cols = queries.shape[1]
    depth = 2 * (int(np.log2(max(perm.shape[0], 1))) + 2) + 8
    for r in prange(n_rows):
        stack = np.empty(depth, np.int64)
        hint = -1
        for c in range(n_cols):
            if not valid[r, c]:
                out_idx[r, c] = -1
                out_d2[r, c] = np.inf
                continue
            q = queries[r, c]
            if not (np.isfinite(q[0]) and np.isfinite(q[1]) and np.isfinite(q[2])):
                out_idx[r, c] = -2
                out_d2[r, c] = np.nan
                continue
            idx, d2, pos = _query_one(q, hint, tp, perm, start, stop, left,
                                      parent, split_axis, split_val, blo, bhi, clo, chi, leaf_of, stack)
            out_idx[r, c] = idx
            out_d2[r, c] = d2
            hint = pos


class KDTree:
    """Exact nearest-neighbour index over an (N, 3) array of points."""

    def __init__(self, points, leaf_size=LEAF_SIZE):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("cannot build a KD-tree over zero points")
        if not np.isfinite(pts).all():
            raise ValueError("KD-tree points must be finite")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.points = pts
        self.leaf_size = int(leaf_size)
        self._arrays = _build(pts, self.leaf_size)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n_nodes(self):
        return self._arrays[2].shape[0]

    def query_grid(self, queries, valid=None):
        """Query an (H, W, 3) grid of points; returns (index, squared distance).

        Invalid grid cells get index -1 and squared distance ``inf``.
        """
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim != 3 or q.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) queries, got shape {q.shape}")
        if valid is None:
            valid = np.ones(q.shape[:2], dtype=np.bool_)
        valid = np.ascontiguousarray(valid, dtype=np.bool_)
        if valid.shape != q.shape[:2]:
            raise ValueError(f"valid mask {valid.shape} does not match queries {q.shape[:2]}")
        out_idx = np.empty(q.shape[:2], np.int64)
        out_d2 = np.empty(q.shape[:2], np.float64)
        _query_rows(q, valid, *self._arrays, out_idx, out_d2)
        bad = out_idx == -2
        if bad.any():
            v, u = np.argwhere(bad)[0]
            raise ValueError(f"query points must be finite where valid; ({u}, {v}) is not")
        return out_idx, out_d2

    def query(self, points):
        """Nearest neighbour of each row of an (M, 3) array: (index, distance)."""
        q = np.asarray(points, dtype=np.float64).reshape(1, -1, 3)
        idx, d2 = self.query_grid(q)
        return idx[0], np.sqrt(d2[0])
