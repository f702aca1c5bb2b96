"""Scan-to-map refinement of the current pose.

The cost jointly penalizes the sliding-window feature residuals
``T @ P_c - T_i @ F_i`` (window poses fixed) and the point-to-plane
distances of the scan's plane points to planes spanned by three map
neighbours. Only the current pose is optimized, with Levenberg-Marquardt on
its 6-dim left tangent; plane associations are rebuilt after every accepted
step.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DegeneratePlane
from .features import match_descriptors
from .geometry import Se3Pose, skew
from .ikd_tree import ROOT, IkdTree, _knn

MAX_ITERATIONS = 10
STEP_TOL = 1e-6
ANCHOR_RADIUS = 1.0
PLANE_RMS_MAX = 0.05
N_NEIGHBOURS = 5
COLLINEAR_EPS = 1e-6
# eigen-directions of the normal matrix below this relative level are left untouched
NULL_SPACE_REL = 1e-9
BA_GATE_MIN = 0.05


@dataclass
class WindowFrame:
    pose: Se3Pose
    frame: object  # IntensityFrame
    timestamp: float

    @property
    def features(self):
        return self.frame.features


@dataclass
class PlaneAssociation:
    source: np.ndarray
    anchors: np.ndarray  # (3, 3)
    normal: np.ndarray

    @classmethod
    def from_anchors(cls, source, a0, a1, a2):
        anchors = np.array([a0, a1, a2], dtype=float)
        return cls(np.asarray(source, dtype=float), anchors, plane_normal(anchors))


@dataclass
class BaCorrespondences:
    window_index: np.ndarray  # (M,)
    current: np.ndarray  # (M, 3) current-frame points
    window: np.ndarray  # (M, 3) window-frame points

    def __len__(self):
        return len(self.window_index)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))

    def subset(self, mask):
        return BaCorrespondences(self.window_index[mask], self.current[mask], self.window[mask])


@dataclass
class OptimizeResult:
    pose: Se3Pose
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    n_ba: int = 0
    n_planes: int = 0
    fallback: bool = False
    accepted_costs: list = field(default_factory=list)  # (before, after) per accepted step


def plane_normal(anchors):
    a0, a1, a2 = np.asarray(anchors, dtype=float)
    n = np.cross(a1 - a0, a2 - a0)
    nn = float(np.linalg.norm(n))
    if nn <= COLLINEAR_EPS:
        raise DegeneratePlane(f"anchors are collinear (|cross| = {nn:.3g})")
    return n / nn


def plane_residual(assoc, pose):
    """Signed distance of ``pose @ source`` to the anchor plane."""
    n = plane_normal(assoc.anchors)
    return float((pose.transform_point(assoc.source) - assoc.anchors[0]) @ n)


def plane_residual_jacobian(assoc, pose):
    n = plane_normal(assoc.anchors)
    y = pose.transform_point(assoc.source)
    return np.concatenate([np.cross(y, n), n])


def ba_residual(window, current_pose, correspondences):
    """One 3-vector ``T @ P_c - T_i @ F_i`` per correspondence."""
    c = correspondences
    if len(c) == 0:
        return np.zeros((0, 3))
    out = current_pose.transform_points(c.current)
    for i, wf in enumerate(window):
        sel = c.window_index == i
        if sel.any():
            out[sel] -= wf.pose.transform_points(c.window[sel])
    return out


def ba_residual_jacobian(current_pose, point):
    y = current_pose.transform_point(point)
    J = np.empty((3, 6))
    J[:, :3] = -skew(y)
    J[:, 3:] = np.eye(3)
    return J


def match_window(window, frame, max_hamming=64, ratio=0.8):
    idx, cur, win = [], [], []
    for i, wf in enumerate(window):
        ia, ib, _ = match_descriptors(wf.frame.descriptors, frame.descriptors, max_hamming, ratio)
        if len(ia) == 0:
            continue
        idx.append(np.full(len(ia), i, dtype=np.int64))
        cur.append(frame.points[ib])
        win.append(wf.frame.points[ia])
    if not idx:
        return BaCorrespondences.empty()
    return BaCorrespondences(np.concatenate(idx), np.vstack(cur), np.vstack(win))


def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, r * r, 2.0 * delta * a - delta * delta)


class _Associations:
    """Vectorized plane associations for a batch of source points."""

    def __init__(self, sources, anchors, normals):
        self.sources = sources
        self.anchors = anchors  # (N, 3, 3)
        self.normals = normals

    def __len__(self):
        return len(self.sources)


@numba.njit(cache=True)
def _associate(Y, root, pt, left, right, deleted, bmin, bmax, stack, k, r2, rms_max, eps, keep, anchors, normals):
    dstack = np.empty(stack.shape[0])
    nb_d2 = np.empty(k)
    nb = np.empty((k, 3))
    cov = np.empty((3, 3))
    for i in range(Y.shape[0]):
        keep[i] = False
        c = _knn(Y[i], k, root, pt, left, right, deleted, bmin, bmax, nb_d2, nb, stack, dstack, r2)
        if c < k:
            continue
        mx = my = mz = 0.0
        for j in range(k):
            mx += nb[j, 0]
            my += nb[j, 1]
            mz += nb[j, 2]
        mx /= k
        my /= k
        mz /= k
        for a in range(3):
            for b in range(3):
                cov[a, b] = 0.0
        for j in range(k):
            d0 = nb[j, 0] - mx
            d1 = nb[j, 1] - my
            d2 = nb[j, 2] - mz
            cov[0, 0] += d0 * d0
            cov[0, 1] += d0 * d1
            cov[0, 2] += d0 * d2
            cov[1, 1] += d1 * d1
            cov[1, 2] += d1 * d2
            cov[2, 2] += d2 * d2
        cov[1, 0] = cov[0, 1]
        cov[2, 0] = cov[0, 2]
        cov[2, 1] = cov[1, 2]
        lam = np.linalg.eigvalsh(cov)[0]
        if math.sqrt(max(lam, 0.0) / k) >= rms_max:
            continue
        # anchor triple of the best plane fit with the worst neighbour trimmed;
        # near a crease the largest triangle tends to straddle both surfaces
        best_fit = np.inf
        best = -1.0
        ba = bb = bc = -1
        bx = by = bz = 0.0
        for a in range(k - 2):
            for b in range(a + 1, k - 1):
                ex = nb[b, 0] - nb[a, 0]
                ey = nb[b, 1] - nb[a, 1]
                ez = nb[b, 2] - nb[a, 2]
                for c3 in range(b + 1, k):
                    fx = nb[c3, 0] - nb[a, 0]
                    fy = nb[c3, 1] - nb[a, 1]
                    fz = nb[c3, 2] - nb[a, 2]
                    cx = ey * fz - ez * fy
                    cy = ez * fx - ex * fz
                    cz = ex * fy - ey * fx
                    cn = math.sqrt(cx * cx + cy * cy + cz * cz)
                    if cn <= eps:
                        continue
                    total = 0.0
                    worst = 0.0
                    for j in range(k):
                        dj = ((nb[j, 0] - nb[a, 0]) * cx + (nb[j, 1] - nb[a, 1]) * cy
                              + (nb[j, 2] - nb[a, 2]) * cz) / cn
                        total += dj * dj
                        worst = max(worst, dj * dj)
                    fit = total - worst
                    if fit < best_fit - 1e-15 or (fit <= best_fit + 1e-15 and cn > best):
                        best_fit = min(fit, best_fit)
                        best = cn
                        ba, bb, bc = a, b, c3
                        bx, by, bz = cx, cy, cz
        if best <= eps:
            continue
        keep[i] = True
        for a in range(3):
            anchors[i, 0, a] = nb[ba, a]
            anchors[i, 1, a] = nb[bb, a]
            anchors[i, 2, a] = nb[bc, a]
        normals[i, 0] = bx / best
        normals[i, 1] = by / best
        normals[i, 2] = bz / best


def associate(tree, sources, pose):
    """Plane associations for sensor-frame ``sources`` at ``pose``.

    Five map neighbours are fetched; an association is kept when all five lie
    within 1 m and their least-squares plane RMS is below 5 cm. The anchors
    are the neighbour triple whose plane best fits the neighbours once the
    single worst one is ignored (ties go to the larger triangle).
    """
    sources = np.asarray(sources, dtype=float).reshape(-1, 3)
    if len(sources) == 0 or tree is None or len(tree) < N_NEIGHBOURS:
        return _Associations(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    Y = np.ascontiguousarray(pose.transform_points(sources))
    n = len(Y)
    keep = np.zeros(n, dtype=bool)
    anchors = np.zeros((n, 3, 3))
    normals = np.zeros((n, 3))
    stack = np.zeros(len(tree.stack), dtype=np.int64)
    _associate(Y, int(tree.meta[ROOT]), tree.pt, tree.left, tree.right, tree.deleted, tree.bmin, tree.bmax,
               stack, N_NEIGHBOURS, ANCHOR_RADIUS**2, PLANE_RMS_MAX, COLLINEAR_EPS, keep, anchors, normals)
    return _Associations(sources[keep], anchors[keep], normals[keep])


def _plane_terms(pose, assoc):
    y = pose.transform_points(assoc.sources)
    r = np.einsum("ij,ij->i", y - assoc.anchors[:, 0], assoc.normals)
    J = np.hstack([np.cross(y, assoc.normals), assoc.normals])
    return r, J


def _ba_terms(pose, window_pts_map, cur_pts):
    y = pose.transform_points(cur_pts)
    r = y - window_pts_map
    return r, y


def _cost(pose, assoc, window_pts_map, cur_pts, delta):
    c = 0.0
    if len(cur_pts):
        r, _ = _ba_terms(pose, window_pts_map, cur_pts)
        c += float(np.sum(r * r))
    if len(assoc):
        r, _ = _plane_terms(pose, assoc)
        c += float(np.sum(huber(r, delta)))
    return c


def _normal_equations(pose, assoc, window_pts_map, cur_pts, delta):
    H = np.zeros((6, 6))
    g = np.zeros(6)
    if len(cur_pts):
        r, y = _ba_terms(pose, window_pts_map, cur_pts)
        # J_n = [-[y]x, I]; accumulate J^T J and J^T r in closed form
        n = len(y)
        yy = y.T @ y
        sy = y.sum(axis=0)
        H[:3, :3] += np.trace(yy) * np.eye(3) - yy
        H[:3, 3:] += skew(sy)
        H[3:, :3] += -skew(sy)
        H[3:, 3:] += n * np.eye(3)
        g[:3] += np.cross(y, r).sum(axis=0)
        g[3:] += r.sum(axis=0)
    if len(assoc):
        r, J = _plane_terms(pose, assoc)
        a = np.abs(r)
        w = np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
        H += (J * w[:, None]).T @ J
        g += (J * (w * r)[:, None]).sum(axis=0)
    return H, g


def _lm_step(H, g, lam):
    evals, evecs = np.linalg.eigh(H)
    top = evals[-1]
    if top <= 0:
        return np.zeros(6)
    keep = evals > NULL_SPACE_REL * top
    D = np.diag(H).copy()
    D = np.maximum(D, 1e-12 * top)
    A = H + lam * np.diag(D)
    # solve restricted to the observable subspace of H
    V = evecs[:, keep]
    Ar = V.T @ A @ V
    return -V @ np.linalg.solve(Ar, V.T @ g)


def optimize(current_pose_init, window, tree, plane_points, correspondences=None, huber_delta=0.1):
    """Refine the current pose; ``plane_points`` are in the sensor frame.

    Falls back to (and flags) the initial pose when there is nothing to
    optimize against.
    """
    pose = current_pose_init
    sources = np.asarray(plane_points, dtype=float).reshape(-1, 3)
    corr = correspondences if correspondences is not None else BaCorrespondences.empty()
    if len(corr):
        window_pts_map = _window_points_map(window, corr)
        cur_pts = corr.current
    else:
        window_pts_map = np.zeros((0, 3))
        cur_pts = np.zeros((0, 3))
    assoc = associate(tree, sources, pose)
    result = OptimizeResult(pose=pose, n_ba=len(cur_pts), n_planes=len(assoc))
    if len(cur_pts) == 0 and len(assoc) == 0:
        result.fallback = True
        return result
    cost = _cost(pose, assoc, window_pts_map, cur_pts, huber_delta)
    result.initial_cost = cost
    lam = 1e-4
    it = 0
    while it < MAX_ITERATIONS:
        it += 1
        H, g = _normal_equations(pose, assoc, window_pts_map, cur_pts, huber_delta)
        step = _lm_step(H, g, lam)
        cand = pose.retract(step)
        new_cost = _cost(cand, assoc, window_pts_map, cur_pts, huber_delta)
        if new_cost <= cost:
            result.accepted_costs.append((cost, new_cost))
            pose = cand
            lam = max(lam / 10.0, 1e-10)
            if np.linalg.norm(step) < STEP_TOL:
                break
            assoc = associate(tree, sources, pose)
            cost = _cost(pose, assoc, window_pts_map, cur_pts, huber_delta)
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    result.pose = pose
    result.iterations = it
    result.final_cost = cost
    result.n_planes = len(assoc)
    return result


def _window_points_map(window, corr):
    out = np.empty_like(corr.window)
    for i, wf in enumerate(window):
        sel = corr.window_index == i
        if sel.any():
            out[sel] = wf.pose.transform_points(corr.window[sel])
    return out


def gate_correspondences(window, corr, pose):
    """Drop feature correspondences inconsistent with the initial pose."""
    if len(corr) == 0:
        return corr
    r = np.linalg.norm(ba_residual(window, pose, corr), axis=1)
    gate = max(3.0 * float(np.median(r)), BA_GATE_MIN)
    return corr.subset(r <= gate)


class MapOptimizer:
    """Owns the sliding window and the plane map; sole writer of the tree."""

    def __init__(self, window_size=5, local_map_radius=100.0, huber_delta=0.1, max_hamming=64,
                 ratio=0.8, use_ba=True, dedup_radius=0.05):
        self.window = deque(maxlen=window_size)
        self.tree = IkdTree(dedup_radius=dedup_radius)
        self.local_map_radius = local_map_radius
        self.huber_delta = huber_delta
        self.max_hamming = max_hamming
        self.ratio = ratio
        self.use_ba = use_ba

    def process(self, init_pose, frame, plane_points):
        """Optimize, then add the frame to the window and its plane points to the map."""
        window = list(self.window)
        corr = BaCorrespondences.empty()
        if self.use_ba and window:
            corr = gate_correspondences(window, match_window(window, frame, self.max_hamming, self.ratio), init_pose)
        if len(self.tree) == 0 and len(corr) == 0:
            result = OptimizeResult(pose=init_pose, fallback=True)
        else:
            result = optimize(init_pose, window, self.tree, plane_points, corr, self.huber_delta)
        pose = result.pose
        pts = np.asarray(plane_points, dtype=float).reshape(-1, 3)
        if len(pts):
            self.tree.insert(pose.transform_points(pts))
        self.tree.remove_beyond(pose.t, self.local_map_radius)
        self.window.append(WindowFrame(pose, frame, frame.timestamp))
        return result
