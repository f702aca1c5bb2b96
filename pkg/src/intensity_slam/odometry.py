"""Frame-to-frame intensity odometry from matched 3D feature points.

``register_matched`` solves the score-weighted point-to-point problem in
closed form inside a trimmed robust loop. ``icp_align`` is a classic
point-to-point ICP kept only as a reference for tests; it is never used by
the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, InsufficientMatches, InvalidInput, NoConvergence
from .features import match_descriptors, match_scores
from .geometry import Se3Pose, weighted_rigid_align

MAX_TRIM_ROUNDS = 5
TRIM_FACTOR = 3.0
# residuals at round-off level must never be trimmed
TRIM_FLOOR = 1e-6


@dataclass
class OdometryEstimate:
    relative: Se3Pose
    inlier_count: int
    mean_residual: float
    match_count: int = 0
    low_confidence: bool = False
    rounds: int = 0
    objective_history: list = field(default_factory=list)
    inliers: np.ndarray = None


def _objective(pose, prev_pts, curr_pts, w):
    r = curr_pts - pose.transform_points(prev_pts)
    return float(np.sum(w * np.einsum("ij,ij->i", r, r)))


def register_matched(prev_pts, curr_pts, scores=None, min_matches=8):
    """Rigid transform mapping ``prev_pts`` onto ``curr_pts``.

    Minimizes ``sum S_n^2 |curr_n - (R prev_n + T)|^2``; after each solve,
    matches whose residual exceeds three times the median inlier residual
    are dropped, for at most five rounds.
    """
    prev_pts = np.asarray(prev_pts, dtype=float).reshape(-1, 3)
    curr_pts = np.asarray(curr_pts, dtype=float).reshape(-1, 3)
    n = len(prev_pts)
    if len(curr_pts) != n:
        raise InvalidInput("point lists differ in length")
    if n < min_matches:
        raise InsufficientMatches(f"{n} matches < {min_matches}")
    s = np.ones(n) if scores is None else np.asarray(scores, dtype=float).reshape(n)
    w_full = s * s
    inlier = w_full > 0
    history = []
    pose = None
    rounds = 0
    for rounds in range(1, MAX_TRIM_ROUNDS + 1):
        w = np.where(inlier, w_full, 0.0)
        pose = weighted_rigid_align(prev_pts, curr_pts, w)
        history.append(_objective(pose, prev_pts, curr_pts, w))
        res = np.linalg.norm(curr_pts - pose.transform_points(prev_pts), axis=1)
        med = float(np.median(res[inlier]))
        keep = inlier & (res <= max(TRIM_FACTOR * med, TRIM_FLOOR))
        if keep.sum() < 3 or np.array_equal(keep, inlier):
            break
        inlier = keep
    res = np.linalg.norm(curr_pts - pose.transform_points(prev_pts), axis=1)
    return OdometryEstimate(
        relative=pose,
        inlier_count=int(inlier.sum()),
        mean_residual=float(res[inlier].mean()),
        match_count=n,
        rounds=rounds,
        objective_history=history,
        inliers=inlier,
    )


def icp_align(src, dst, max_iter=50, max_residual=0.5, tol=1e-6, stats=None):
    """Point-to-point ICP returning the pose ``T`` with ``dst ~ T(src)``.

    Raises:
        NoConvergence: no convergence within ``max_iter`` or final mean
            nearest-neighbour residual above ``max_residual``.
    """
    a = src.valid_points() if hasattr(src, "valid_points") else np.asarray(src, float)
    b = dst.valid_points() if hasattr(dst, "valid_points") else np.asarray(dst, float)
    if len(a) < 100 or len(b) < 100:
        raise InvalidInput("icp_align needs at least 100 valid points per scan")
    tree = cKDTree(b)
    pose = Se3Pose.identity()
    for it in range(1, max_iter + 1):
        moved = pose.transform_points(a)
        dist, idx = tree.query(moved)
        gate = max(3.0 * float(np.median(dist)), 1e-9)
        keep = dist <= gate
        step = weighted_rigid_align(moved[keep], b[idx[keep]])
        pose = step.compose(pose)
        if step.rotation_angle() < tol and np.linalg.norm(step.t) < tol:
            dist, _ = tree.query(pose.transform_points(a))
            if float(dist.mean()) > max_residual:
                raise NoConvergence(f"ICP converged to residual {dist.mean():.3f} m > {max_residual}")
            if stats is not None:
                stats["iterations"] = it
                stats["mean_residual"] = float(dist.mean())
            return pose
    raise NoConvergence(f"ICP did not converge in {max_iter} iterations")


class IntensityOdometry:
    """Stateful wrapper: matching, registration and constant-velocity fallback."""

    def __init__(self, min_matches=8, max_hamming=64, ratio=0.8):
        self.min_matches = min_matches
        self.max_hamming = max_hamming
        self.ratio = ratio
        self.last_motion = Se3Pose.identity()

    def advance(self, prev, curr):
        """Sensor motion ``prev -> curr`` (pose of ``curr`` in ``prev``'s frame)."""
        ia, ib, dist = match_descriptors(prev.descriptors, curr.descriptors, self.max_hamming, self.ratio)
        try:
            est = register_matched(prev.points[ia], curr.points[ib], match_scores(dist), self.min_matches)
        except (InsufficientMatches, DegenerateConfiguration):
            return OdometryEstimate(
                relative=self.last_motion,
                inlier_count=0,
                mean_residual=0.0,
                match_count=len(ia),
                low_confidence=True,
            )
        # register_matched maps prev points into the current frame; the sensor motion is its inverse
        est.relative = est.relative.inverse()
        self.last_motion = est.relative
        return est
