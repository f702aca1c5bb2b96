"""Keyframe pose graph with a sparse Levenberg-Marquardt solver.

Edge residual: ``r = log(Z^-1 Xi^-1 Xj)`` for a measurement ``Z`` from vertex
``i`` to vertex ``j``; the cost is ``sum r^T Omega r``. Vertices are
perturbed on the left like everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import DisconnectedGraph, InvalidInput, NotPositiveDefinite
from .geometry import Se3Pose, skew, so3_right_jacobian_inv

ODOMETRY = "odometry"
LOOP = "loop"
ODOMETRY_INFORMATION = np.eye(6)
LOOP_INFORMATION = 0.5 * np.eye(6)
MAX_ITERATIONS = 50
GRAD_TOL = 1e-8


@dataclass
class Keyframe:
    id: int
    pose: Se3Pose
    bow: object = None
    frame: object = None
    timestamp: float = 0.0
    scan_index: int = -1


@dataclass
class GraphEdge:
    source: int
    target: int
    relative: Se3Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    kind: str = ODOMETRY

    def __post_init__(self):
        self.information = np.asarray(self.information, dtype=float)
        check_information(self.information)


def check_information(info):
    if info.shape != (6, 6) or not np.all(np.isfinite(info)):
        raise NotPositiveDefinite("information must be a finite 6x6 matrix")
    if np.max(np.abs(info - info.T)) > 1e-9:
        raise NotPositiveDefinite("information matrix is not symmetric")
    if np.linalg.eigvalsh(0.5 * (info + info.T))[0] <= 0:
        raise NotPositiveDefinite("information matrix is not positive definite")


def maybe_keyframe(pose, last_kf, matched_count, cfg):
    """Keyframe when travelled, turned, or tracking quality dropped past the config thresholds."""
    if last_kf is None:
        return True
    last = last_kf.pose if isinstance(last_kf, Keyframe) else last_kf
    rel = last.inverse() @ pose
    return (
        float(np.linalg.norm(rel.t)) > cfg.kf_dist
        or rel.rotation_angle() > cfg.kf_angle
        or matched_count < cfg.kf_min_matches
    )


def edge_residual(xi, xj, z):
    return (z.inverse() @ xi.inverse() @ xj).log()


def edge_jacobians(xi, xj, z):
    """``(r, Ji, Jj)`` of the residual w.r.t. left perturbations of ``xi`` and ``xj``."""
    e = z.inverse() @ xi.inverse() @ xj
    r = e.log()
    jr_inv = so3_right_jacobian_inv(r[:3])
    rm = z.R.T @ xi.R.T
    a = jr_inv @ xj.R.T
    b = rm @ skew(xj.t)
    Jj = np.zeros((6, 6))
    Jj[:3, :3] = a
    Jj[3:, :3] = -b
    Jj[3:, 3:] = rm
    Ji = -Jj
    return r, Ji, Jj


def graph_cost(poses, edges):
    c = 0.0
    for e in edges:
        r = edge_residual(poses[e.source], poses[e.target], e.relative)
        c += float(r @ e.information @ r)
    return c


def _check_connected(ids, edges):
    index = {v: k for k, v in enumerate(ids)}
    rows = [index[e.source] for e in edges]
    cols = [index[e.target] for e in edges]
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    n, _ = connected_components(adj, directed=False)
    if n > 1:
        raise DisconnectedGraph(f"pose graph has {n} connected components")


def optimize_graph(vertices, edges, fixed=(0,), max_iterations=MAX_ITERATIONS, grad_tol=GRAD_TOL, stats=None):
    """Optimized copy of ``vertices`` (dict id -> Se3Pose).

    Raises:
        DisconnectedGraph: the edges leave more than one component.
        NotPositiveDefinite: an edge carries an invalid information matrix.
    """
    poses = dict(vertices)
    ids = sorted(poses)
    fixed = set(fixed)
    if not fixed & set(ids):
        raise InvalidInput("at least one vertex must be fixed")
    for e in edges:
        if e.source not in poses or e.target not in poses:
            raise InvalidInput(f"edge {e.source}->{e.target} references an unknown vertex")
        check_information(e.information)
    if len(ids) > 1:
        _check_connected(ids, edges)
    free = [v for v in ids if v not in fixed]
    col = {v: k for k, v in enumerate(free)}
    n = 6 * len(free)
    cost = graph_cost(poses, edges)
    history = [cost]
    if stats is not None:
        stats.update(iterations=0, initial_cost=cost, final_cost=cost, history=history)
    if n == 0:
        return poses
    lam = 1e-4
    it = 0
    while it < max_iterations:
        it += 1
        H, g = _normal_equations(poses, edges, col, n)
        if np.linalg.norm(g) < grad_tol:
            break
        d = H.diagonal()
        A = (H + sp.diags(lam * np.maximum(d, 1e-12))).tocsc()
        step = -spsolve(A, g)
        cand = dict(poses)
        for v, k in col.items():
            cand[v] = poses[v].retract(step[6 * k : 6 * k + 6])
        new_cost = graph_cost(cand, edges)
        if new_cost <= cost:
            converged = cost - new_cost <= 1e-15 * max(cost, 1.0) and np.linalg.norm(step) < 1e-12
            poses, cost = cand, new_cost
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if converged:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    if stats is not None:
        stats.update(iterations=it, final_cost=cost)
    return poses


def _normal_equations(poses, edges, col, n):
    rows, cols, vals = [], [], []
    g = np.zeros(n)
    for e in edges:
        r, Ji, Jj = edge_jacobians(poses[e.source], poses[e.target], e.relative)
        W = e.information
        blocks = []
        if e.source in col:
            blocks.append((col[e.source], Ji))
        if e.target in col:
            blocks.append((col[e.target], Jj))
        for a, Ja in blocks:
            g[6 * a : 6 * a + 6] += Ja.T @ W @ r
            for b, Jb in blocks:
                blk = Ja.T @ W @ Jb
                rr, cc = np.meshgrid(np.arange(6) + 6 * a, np.arange(6) + 6 * b, indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(blk.ravel())
    if rows:
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    else:
        H = sp.csr_matrix((n, n))
    return H, g


class PoseGraph:
    """Keyframes connected by odometry edges, plus loop edges once verified."""

    def __init__(self, odometry_information=ODOMETRY_INFORMATION, loop_information=LOOP_INFORMATION):
        self.keyframes = []
        self.edges = []
        self.odometry_information = odometry_information
        self.loop_information = loop_information
        self.loops = []
        self.last_stats = {}

    def __len__(self):
        return len(self.keyframes)

    @property
    def latest(self):
        return self.keyframes[-1] if self.keyframes else None

    def add_keyframe(self, pose, frame=None, bow=None, timestamp=0.0, scan_index=-1):
        kf = Keyframe(len(self.keyframes), pose, bow, frame, timestamp, scan_index)
        if self.keyframes:
            prev = self.keyframes[-1]
            self.edges.append(GraphEdge(prev.id, kf.id, prev.pose.inverse() @ pose, self.odometry_information, ODOMETRY))
        self.keyframes.append(kf)
        return kf

    def poses(self):
        return {k.id: k.pose for k in self.keyframes}

    def cost(self):
        return graph_cost(self.poses(), self.edges)

    def on_loop(self, candidate):
        """Add a verified loop edge, optimize, rewrite keyframes; returns the correction of the latest keyframe."""
        if not candidate.accepted:
            return Se3Pose.identity()
        before = self.keyframes[-1].pose
        self.edges.append(
            GraphEdge(candidate.match_id, candidate.query_id, candidate.relative, self.loop_information, LOOP)
        )
        self.loops.append(candidate)
        stats = {}
        new = optimize_graph(self.poses(), self.edges, fixed={0}, stats=stats)
        self.last_stats = stats
        for kf in self.keyframes:
            kf.pose = new[kf.id]
        return self.keyframes[-1].pose @ before.inverse()

    def dump(self, path):
        """``VERTEX_SE3:QUAT`` / ``EDGE_SE3:QUAT`` text; information reordered translation-first."""
        perm = [3, 4, 5, 0, 1, 2]
        lines = []
        for kf in self.keyframes:
            t, q = kf.pose.t, kf.pose.quaternion
            lines.append("VERTEX_SE3:QUAT %d %s" % (kf.id, " ".join(f"{v:.9g}" for v in (*t, *q))))
        iu = np.triu_indices(6)
        for e in self.edges:
            t, q = e.relative.t, e.relative.quaternion
            info = e.information[np.ix_(perm, perm)][iu]
            vals = " ".join(f"{v:.9g}" for v in (*t, *q, *info))
            lines.append(f"EDGE_SE3:QUAT {e.source} {e.target} {vals}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
