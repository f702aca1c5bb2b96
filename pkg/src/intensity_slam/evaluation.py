"""Absolute position error of a trajectory against ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoAssociations
from .geometry import Se3Pose, weighted_rigid_align

MAX_DT = 0.05


@dataclass
class ApeStats:
    mean: float
    median: float
    rmse: float
    max: float
    count: int
    errors: np.ndarray
    alignment: Se3Pose
    est_xyz: np.ndarray  # aligned estimate
    gt_xyz: np.ndarray

    def as_dict(self):
        return {"count": self.count, "mean": self.mean, "median": self.median, "rmse": self.rmse, "max": self.max}


def associate(est_times, gt_times, max_dt=MAX_DT):
    """Index pairs ``(i_est, i_gt)`` of nearest timestamps within ``max_dt``, each gt used once."""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    if len(est_times) == 0 or len(gt_times) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.argsort(gt_times, kind="stable")
    g = gt_times[order]
    pos = np.searchsorted(g, est_times)
    lo = np.clip(pos - 1, 0, len(g) - 1)
    hi = np.clip(pos, 0, len(g) - 1)
    pick = np.where(np.abs(g[hi] - est_times) < np.abs(g[lo] - est_times), hi, lo)
    ok = np.abs(g[pick] - est_times) <= max_dt
    ie = np.flatnonzero(ok)
    ig = order[pick[ok]]
    _, first = np.unique(ig, return_index=True)
    keep = np.sort(first)
    return ie[keep], ig[keep]


def ape(est, gt, max_dt=MAX_DT, align=True):
    """Translational APE after rigid alignment of ``est`` onto ``gt``.

    Both inputs are sequences of ``TrajectoryRecord``-like objects (with
    ``timestamp`` and ``pose``) or ``(timestamp, pose)`` tuples.
    """
    et, ep = _unpack(est)
    gtt, gp = _unpack(gt)
    ie, ig = associate(et, gtt, max_dt)
    if len(ie) == 0:
        raise NoAssociations(f"no timestamps associate within {max_dt} s")
    a = ep[ie]
    b = gp[ig]
    if align and len(ie) >= 3:
        T = weighted_rigid_align(a, b, allow_degenerate=True)
    else:
        T = Se3Pose.identity()
    aligned = T.transform_points(a)
    err = np.linalg.norm(aligned - b, axis=1)
    return ApeStats(
        mean=float(err.mean()),
        median=float(np.median(err)),
        rmse=float(np.sqrt(np.mean(err * err))),
        max=float(err.max()),
        count=len(err),
        errors=err,
        alignment=T,
        est_xyz=aligned,
        gt_xyz=b,
    )


def _unpack(traj):
    ts, xyz = [], []
    for rec in traj:
        if hasattr(rec, "timestamp"):
            ts.append(rec.timestamp)
            xyz.append(rec.pose.t)
        else:
            ts.append(rec[0])
            xyz.append(rec[1].t)
    return np.asarray(ts, dtype=float), np.asarray(xyz, dtype=float).reshape(-1, 3)


def format_stats(stats, sep=","):
    keys = ("count", "mean", "median", "rmse", "max")
    d = stats.as_dict()
    return sep.join(keys) + "\n" + sep.join(str(d[k]) if k == "count" else f"{d[k]:.6f}" for k in keys)
