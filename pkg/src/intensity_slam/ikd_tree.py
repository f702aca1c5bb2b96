"""Incremental 3D k-d tree for the plane-point map.

Nodes live in flat arrays so the hot paths (insert, kNN, radius pruning,
partial rebuild) run as numba kernels. Deletion is lazy: a node is flagged
and skipped by queries; a subtree is rebuilt flat when its live/total ratio
falls below ``alpha`` or when it grows deeper than ``2*log2(size) + 4``.

Single writer, many readers: ``knn``/``knn_batch`` may run concurrently with
each other, ``insert``/``remove_beyond`` need exclusive access.
"""

from __future__ import annotations

import math
import threading
from pathlib import Path

import numpy as np
from numba import njit

# meta slots
ROOT, NEXT, NFREE, SIZE, REBUILDS = 0, 1, 2, 3, 4

@njit(cache=True)
def _alloc(meta, free):
    if meta[NFREE] > 0:
        meta[NFREE] -= 1
        return free[meta[NFREE]]
    n = meta[NEXT]
    meta[NEXT] += 1
    return n


@njit(cache=True)
def _box_d2(q, bmin, bmax, n):
    d2 = 0.0
    for a in range(3):
        v = q[a]
        if v < bmin[n, a]:
            t = bmin[n, a] - v
            d2 += t * t
        elif v > bmax[n, a]:
            t = v - bmax[n, a]
            d2 += t * t
    return d2


@njit(cache=True)
def _box_far_d2(q, bmin, bmax, n):
    d2 = 0.0
    for a in range(3):
        t = max(abs(q[a] - bmin[n, a]), abs(q[a] - bmax[n, a]))
        d2 += t * t
    return d2


@njit(cache=True)
def _less(d2a, pa, d2b, pb):
    # (distance, x, y, z) lexicographic order
    if d2a != d2b:
        return d2a < d2b
    for a in range(3):
        if pa[a] != pb[a]:
            return pa[a] < pb[a]
    return False


@njit(cache=True)
def _knn(q, k, root, pt, left, right, deleted, bmin, bmax, out_d2, out_pt, stack, dstack, max_d2=np.inf):
    # stack entries carry their box distance so each box is measured once;
    # only points within max_d2 are reported
    count = 0
    if root < 0:
        return 0
    sp = 0
    stack[0] = root
    dstack[0] = _box_d2(q, bmin, bmax, root)
    sp = 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if dstack[sp] > (out_d2[k - 1] if count == k else max_d2):
            continue
        if not deleted[n]:
            dx = pt[n, 0] - q[0]
            dy = pt[n, 1] - q[1]
            dz = pt[n, 2] - q[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 <= max_d2 and (count < k or _less(d2, pt[n], out_d2[count - 1], out_pt[count - 1])):
                j = count if count < k else k - 1
                while j > 0 and _less(d2, pt[n], out_d2[j - 1], out_pt[j - 1]):
                    out_d2[j] = out_d2[j - 1]
                    out_pt[j, 0] = out_pt[j - 1, 0]
                    out_pt[j, 1] = out_pt[j - 1, 1]
                    out_pt[j, 2] = out_pt[j - 1, 2]
                    j -= 1
                out_d2[j] = d2
                out_pt[j, 0] = pt[n, 0]
                out_pt[j, 1] = pt[n, 1]
                out_pt[j, 2] = pt[n, 2]
                if count < k:
                    count += 1
        l = left[n]
        r = right[n]
        dl = _box_d2(q, bmin, bmax, l) if l >= 0 else np.inf
        dr = _box_d2(q, bmin, bmax, r) if r >= 0 else np.inf
        worst = out_d2[k - 1] if count == k else max_d2
        # push the far side first so the near side is expanded first
        if dl <= dr:
            if r >= 0 and dr <= worst:
                stack[sp] = r
                dstack[sp] = dr
                sp += 1
            if l >= 0 and dl <= worst:
                stack[sp] = l
                dstack[sp] = dl
                sp += 1
        else:
            if l >= 0 and dl <= worst:
                stack[sp] = l
                dstack[sp] = dl
                sp += 1
            if r >= 0 and dr <= worst:
                stack[sp] = r
                dstack[sp] = dr
                sp += 1
    return count


@njit(cache=True)
def _knn_batch(Q, k, root, pt, left, right, deleted, bmin, bmax, stack, max_d2):
    nq = Q.shape[0]
    out_d2 = np.full((nq, k), np.inf)
    out_pt = np.zeros((nq, k, 3))
    counts = np.zeros(nq, dtype=np.int64)
    dstack = np.empty(stack.shape[0])
    for i in range(nq):
        counts[i] = _knn(Q[i], k, root, pt, left, right, deleted, bmin, bmax, out_d2[i], out_pt[i], stack, dstack, max_d2)
    return out_pt, out_d2, counts


@njit(cache=True)
def _build(ids_buf, lo, hi, pts_buf, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work):
    """Balanced build of pts_buf[lo:hi]; returns root node id or -1."""
    if hi <= lo:
        return -1
    # explicit stack of (lo, hi, parent, side)
    st_lo = work[0]
    st_hi = work[1]
    st_par = work[2]
    st_side = work[3]
    sp = 0
    st_lo[0] = lo
    st_hi[0] = hi
    st_par[0] = -1
    st_side[0] = 0
    sp = 1
    sub_root = -1
    while sp > 0:
        sp -= 1
        a = st_lo[sp]
        b = st_hi[sp]
        par = st_par[sp]
        side = st_side[sp]
        # widest axis
        best_ax = 0
        best_spread = -1.0
        for ax in range(3):
            mn = np.inf
            mx = -np.inf
            for i in range(a, b):
                v = pts_buf[ids_buf[i], ax]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            if mx - mn > best_spread:
                best_spread = mx - mn
                best_ax = ax
        seg = ids_buf[a:b].copy()
        vals = np.empty(b - a)
        for i in range(b - a):
            vals[i] = pts_buf[seg[i], best_ax]
        order = np.argsort(vals, kind="mergesort")
        for i in range(b - a):
            ids_buf[a + i] = seg[order[i]]
        m = a + (b - a) // 2
        pivot = pts_buf[ids_buf[m], best_ax]
        # everything left of the split must be strictly smaller
        while m > a and pts_buf[ids_buf[m - 1], best_ax] == pivot:
            m -= 1
        node = _alloc(meta, free)
        src = ids_buf[m]
        pt[node, 0] = pts_buf[src, 0]
        pt[node, 1] = pts_buf[src, 1]
        pt[node, 2] = pts_buf[src, 2]
        axis[node] = best_ax
        deleted[node] = False
        left[node] = -1
        right[node] = -1
        if par < 0:
            sub_root = node
        elif side == 0:
            left[par] = node
        else:
            right[par] = node
        if m + 1 < b:
            st_lo[sp] = m + 1
            st_hi[sp] = b
            st_par[sp] = node
            st_side[sp] = 1
            sp += 1
        if a < m:
            st_lo[sp] = a
            st_hi[sp] = m
            st_par[sp] = node
            st_side[sp] = 0
            sp += 1
    _recount(sub_root, pt, left, right, deleted, live, total, bmin, bmax, work[0])
    return sub_root


@njit(cache=True)
def _recount(sub_root, pt, left, right, deleted, live, total, bmin, bmax, scratch):
    """Post-order recomputation of counts and boxes below ``sub_root``."""
    if sub_root < 0:
        return
    # collect pre-order, then sweep in reverse (children before parents)
    order = scratch
    # the tail of scratch doubles as the DFS stack
    cap = scratch.shape[0]
    sp = cap - 1
    scratch[sp] = sub_root
    n_ord = 0
    while sp < cap:
        n = scratch[sp]
        sp += 1
        order[n_ord] = n
        n_ord += 1
        if left[n] >= 0:
            sp -= 1
            scratch[sp] = left[n]
        if right[n] >= 0:
            sp -= 1
            scratch[sp] = right[n]
    for i in range(n_ord - 1, -1, -1):
        n = order[i]
        lv = 0 if deleted[n] else 1
        tt = 1
        for a in range(3):
            bmin[n, a] = pt[n, a]
            bmax[n, a] = pt[n, a]
        for c in (left[n], right[n]):
            if c >= 0:
                lv += live[c]
                tt += total[c]
                for a in range(3):
                    if bmin[c, a] < bmin[n, a]:
                        bmin[n, a] = bmin[c, a]
                    if bmax[c, a] > bmax[n, a]:
                        bmax[n, a] = bmax[c, a]
        live[n] = lv
        total[n] = tt


@njit(cache=True)
def _rebuild(p, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work, stack):
    """Rebuild the subtree rooted at ``p`` from its live points; returns new root."""
    nlive = live[p]
    pts_buf = np.empty((max(nlive, 1), 3))
    cnt = 0
    sp = 0
    stack[sp] = p
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not deleted[n]:
            pts_buf[cnt, 0] = pt[n, 0]
            pts_buf[cnt, 1] = pt[n, 1]
            pts_buf[cnt, 2] = pt[n, 2]
            cnt += 1
        if left[n] >= 0:
            stack[sp] = left[n]
            sp += 1
        if right[n] >= 0:
            stack[sp] = right[n]
            sp += 1
        # release the slot
        left[n] = -1
        right[n] = -1
        free[meta[NFREE]] = n
        meta[NFREE] += 1
    ids = np.arange(cnt)
    meta[REBUILDS] += 1
    return _build(ids, 0, cnt, pts_buf, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work)


@njit(cache=True)
def _log2(x):
    return math.log(x) / math.log(2.0) if x > 1 else 0.0


@njit(cache=True)
def _insert_batch(P, dedup_r2, alpha, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work, stack, path):
    inserted = 0
    nn_d2 = np.empty(1)
    nn_pt = np.empty((1, 3))
    dstack = np.empty(stack.shape[0])
    for i in range(P.shape[0]):
        x = P[i]
        root = meta[ROOT]
        if root >= 0 and dedup_r2 > 0.0 and live[root] > 0:
            c = _knn(x, 1, root, pt, left, right, deleted, bmin, bmax, nn_d2, nn_pt, stack, dstack, dedup_r2)
            if c > 0 and nn_d2[0] < dedup_r2:
                continue
        node = _alloc(meta, free)
        pt[node, 0] = x[0]
        pt[node, 1] = x[1]
        pt[node, 2] = x[2]
        left[node] = -1
        right[node] = -1
        deleted[node] = False
        live[node] = 1
        total[node] = 1
        for a in range(3):
            bmin[node, a] = x[a]
            bmax[node, a] = x[a]
        inserted += 1
        meta[SIZE] += 1
        if root < 0:
            axis[node] = 0
            meta[ROOT] = node
            continue
        depth = 0
        cur = root
        while True:
            path[depth] = cur
            depth += 1
            live[cur] += 1
            total[cur] += 1
            for a in range(3):
                if x[a] < bmin[cur, a]:
                    bmin[cur, a] = x[a]
                if x[a] > bmax[cur, a]:
                    bmax[cur, a] = x[a]
            ax = axis[cur]
            if x[ax] < pt[cur, ax]:
                if left[cur] < 0:
                    left[cur] = node
                    break
                cur = left[cur]
            else:
                if right[cur] < 0:
                    right[cur] = node
                    break
                cur = right[cur]
        axis[node] = (axis[cur] + 1) % 3
        # topmost ancestor that is too deep or too sparse gets rebuilt
        for j in range(depth):
            p = path[j]
            height = depth - j + 1
            if height > 2.0 * _log2(live[p]) + 4.0 or live[p] < alpha * total[p]:
                old_total = total[p]
                newp = _rebuild(p, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work, stack)
                if j == 0:
                    meta[ROOT] = newp
                else:
                    par = path[j - 1]
                    if left[par] == p:
                        left[par] = newp
                    else:
                        right[par] = newp
                new_total = total[newp] if newp >= 0 else 0
                for jj in range(j):
                    total[path[jj]] -= old_total - new_total
                break
    return inserted


@njit(cache=True)
def _remove_beyond(center, r2, alpha, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work, stack):
    root = meta[ROOT]
    if root < 0:
        return 0
    removed = 0
    sp = 0
    stack[sp] = root
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _box_far_d2(center, bmin, bmax, n) <= r2:
            continue
        if not deleted[n]:
            dx = pt[n, 0] - center[0]
            dy = pt[n, 1] - center[1]
            dz = pt[n, 2] - center[2]
            if dx * dx + dy * dy + dz * dz > r2:
                deleted[n] = True
                removed += 1
        if left[n] >= 0:
            stack[sp] = left[n]
            sp += 1
        if right[n] >= 0:
            stack[sp] = right[n]
            sp += 1
    if removed == 0:
        return 0
    meta[SIZE] -= removed
    _recount(root, pt, left, right, deleted, live, total, bmin, bmax, work[0])
    # pre-order sweep: rebuild the topmost subtrees that became too sparse
    n_nodes = total[root] + 1
    node_stack = np.empty(n_nodes, dtype=np.int64)
    par_stack = np.empty(n_nodes, dtype=np.int64)
    side_stack = np.empty(n_nodes, dtype=np.int64)
    sp = 0
    node_stack[0] = root
    par_stack[0] = -1
    side_stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        n = node_stack[sp]
        par = par_stack[sp]
        side = side_stack[sp]
        if live[n] < alpha * total[n]:
            newp = _rebuild(n, meta, free, pt, left, right, axis, deleted, live, total, bmin, bmax, work, stack)
            if par < 0:
                meta[ROOT] = newp
            elif side == 0:
                left[par] = newp
            else:
                right[par] = newp
            continue
        if left[n] >= 0:
            node_stack[sp] = left[n]
            par_stack[sp] = n
            side_stack[sp] = 0
            sp += 1
        if right[n] >= 0:
            node_stack[sp] = right[n]
            par_stack[sp] = n
            side_stack[sp] = 1
            sp += 1
    if meta[ROOT] >= 0:
        _recount(meta[ROOT], pt, left, right, deleted, live, total, bmin, bmax, work[0])
    return removed


class IkdTree:
    """Incremental k-d tree with lazy deletion and partial rebuilds."""

    def __init__(self, dedup_radius=0.05, alpha=0.6, capacity=1024):
        self.dedup_radius = float(dedup_radius)
        self.alpha = float(alpha)
        self.meta = np.array([-1, 0, 0, 0, 0], dtype=np.int64)
        self._alloc_arrays(max(int(capacity), 16))
        self._lock = threading.Lock()

    def _alloc_arrays(self, cap):
        self.pt = np.zeros((cap, 3))
        self.left = np.full(cap, -1, dtype=np.int64)
        self.right = np.full(cap, -1, dtype=np.int64)
        self.axis = np.zeros(cap, dtype=np.int64)
        self.deleted = np.zeros(cap, dtype=np.bool_)
        self.live = np.zeros(cap, dtype=np.int64)
        self.total = np.zeros(cap, dtype=np.int64)
        self.bmin = np.zeros((cap, 3))
        self.bmax = np.zeros((cap, 3))
        self.free = np.zeros(cap, dtype=np.int64)
        self._scratch(cap)

    def _scratch(self, cap):
        self.work = np.zeros((4, cap + 1), dtype=np.int64)
        self.stack = np.zeros(2 * cap + 64, dtype=np.int64)
        self.path = np.zeros(cap + 1, dtype=np.int64)

    def _reserve(self, extra):
        cap = len(self.pt)
        need = int(self.meta[NEXT]) + int(extra) + 1
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("pt", "bmin", "bmax"):
            old = getattr(self, name)
            arr = np.zeros((new, 3))
            arr[:cap] = old
            setattr(self, name, arr)
        for name, fill, dt in (
            ("left", -1, np.int64), ("right", -1, np.int64), ("axis", 0, np.int64),
            ("deleted", False, np.bool_), ("live", 0, np.int64), ("total", 0, np.int64),
            ("free", 0, np.int64),
        ):
            old = getattr(self, name)
            arr = np.full(new, fill, dtype=dt)
            arr[:cap] = old
            setattr(self, name, arr)
        self._scratch(new)

    @classmethod
    def from_points(cls, points, dedup_radius=0.05, alpha=0.6):
        """Static balanced build of all ``points`` (no deduplication)."""
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        tree = cls(dedup_radius, alpha, capacity=len(pts) + 1)
        root = _build(
            np.arange(len(pts)), 0, len(pts), pts, tree.meta, tree.free, tree.pt, tree.left,
            tree.right, tree.axis, tree.deleted, tree.live, tree.total, tree.bmin, tree.bmax, tree.work,
        )
        tree.meta[ROOT] = root
        tree.meta[SIZE] = len(pts)
        return tree

    def __len__(self):
        return int(self.meta[SIZE])

    @property
    def size(self):
        return int(self.meta[SIZE])

    @property
    def rebuild_count(self):
        return int(self.meta[REBUILDS])

    def _args(self):
        return (self.meta, self.free, self.pt, self.left, self.right, self.axis, self.deleted,
                self.live, self.total, self.bmin, self.bmax, self.work)

    def insert(self, points):
        """Insert points, skipping any closer than ``dedup_radius`` to a live one."""
        P = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(P) == 0:
            return 0
        if not np.all(np.isfinite(P)):
            raise ValueError("points must be finite")
        with self._lock:
            self._reserve(len(P))
            return int(_insert_batch(P, self.dedup_radius**2, self.alpha, *self._args(), self.stack, self.path))

    def knn(self, query, k):
        """The ``min(k, size)`` nearest live points as ``[(point, sq_dist), ...]``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        pts, d2, counts = self.knn_batch(np.asarray(query, dtype=float).reshape(1, 3), k)
        n = int(counts[0])
        return [(pts[0, i].copy(), float(d2[0, i])) for i in range(n)]

    def knn_batch(self, queries, k, max_dist=None):
        """Batched kNN: ``(points (n,k,3), sq_dists (n,k), counts (n,))``.

        With ``max_dist`` only neighbours within that distance are returned,
        so ``counts`` may fall short of ``k``.
        """
        Q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        stack = np.zeros(len(self.stack), dtype=np.int64)
        max_d2 = np.inf if max_dist is None else float(max_dist) ** 2
        return _knn_batch(Q, int(k), int(self.meta[ROOT]), self.pt, self.left, self.right,
                          self.deleted, self.bmin, self.bmax, stack, max_d2)

    def remove_beyond(self, center, radius):
        """Lazily delete live points farther than ``radius`` from ``center``."""
        if not radius > 0:
            raise ValueError("radius must be positive")
        c = np.asarray(center, dtype=np.float64).reshape(3)
        with self._lock:
            return int(_remove_beyond(c, float(radius) ** 2, self.alpha, *self._args(), self.stack))

    # ----- inspection -----

    def live_points(self):
        root = int(self.meta[ROOT])
        if root < 0:
            return np.zeros((0, 3))
        out = []
        stack = [root]
        while stack:
            n = stack.pop()
            if not self.deleted[n]:
                out.append(self.pt[n])
            for c in (self.left[n], self.right[n]):
                if c >= 0:
                    stack.append(int(c))
        return np.array(out).reshape(-1, 3)

    def depth(self):
        """Number of nodes on the longest root-to-leaf path."""
        root = int(self.meta[ROOT])
        if root < 0:
            return 0
        best = 0
        stack = [(root, 1)]
        while stack:
            n, d = stack.pop()
            best = max(best, d)
            for c in (self.left[n], self.right[n]):
                if c >= 0:
                    stack.append((int(c), d + 1))
        return best

    def check_invariants(self):
        """Full recount of counters plus descent-reachability of every live point."""
        root = int(self.meta[ROOT])
        if root < 0:
            assert self.size == 0
            return

        def recount(n):
            lv = 0 if self.deleted[n] else 1
            tt = 1
            for c in (self.left[n], self.right[n]):
                if c >= 0:
                    a, b = recount(int(c))
                    lv += a
                    tt += b
            assert self.live[n] == lv, f"live counter mismatch at node {n}"
            assert self.total[n] == tt, f"total counter mismatch at node {n}"
            return lv, tt

        import sys

        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10000))
        try:
            lv, _ = recount(root)
        finally:
            sys.setrecursionlimit(old)
        assert lv == self.size, "size does not match live count"
        for p in self.live_points():
            n = root
            found = False
            while n >= 0:
                if not self.deleted[n] and np.array_equal(self.pt[n], p):
                    found = True
                    break
                ax = self.axis[n]
                n = int(self.left[n] if p[ax] < self.pt[n, ax] else self.right[n])
            assert found, f"live point {p} unreachable by descent"

    def dump_xyz(self, path):
        pts = self.live_points()
        with open(Path(path), "w", encoding="utf-8") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
