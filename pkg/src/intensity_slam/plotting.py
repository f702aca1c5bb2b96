"""Matplotlib figures written next to the text outputs (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _xy(traj):
    return np.array([r.pose.t for r in traj]).reshape(-1, 3)


def plot_run(result, path):
    """Top-down view of the odometry, mapping and final trajectories plus keyframes."""
    fig, ax = plt.subplots(figsize=(7, 6))
    for kind, style in (("odometry", ":"), ("mapping", "--"), ("final", "-")):
        p = _xy(result.trajectory(kind))
        ax.plot(p[:, 0], p[:, 1], style, label=kind)
    kf = _xy(result.trajectory("keyframes"))
    if len(kf):
        ax.plot(kf[:, 0], kf[:, 1], "k.", ms=4, label="keyframes")
    for e in result.loop_events:
        if e.accepted:
            a = result.graph.keyframes[e.query_id].pose.t
            b = result.graph.keyframes[e.match_id].pose.t
            ax.plot([a[0], b[0]], [a[1], b[1]], "r-", lw=1.5)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_ape(stats, path, timestamps=None):
    """Aligned estimate vs ground truth (left) and per-pose error (right)."""
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(11, 4.5))
    a0.plot(stats.gt_xyz[:, 0], stats.gt_xyz[:, 1], "k-", label="ground truth")
    a0.plot(stats.est_xyz[:, 0], stats.est_xyz[:, 1], "-", label="estimate (aligned)")
    a0.set_aspect("equal", adjustable="datalim")
    a0.set_xlabel("x [m]")
    a0.set_ylabel("y [m]")
    a0.legend(loc="best")
    x = np.arange(stats.count) if timestamps is None else np.asarray(timestamps)
    a1.plot(x, stats.errors)
    a1.axhline(stats.rmse, color="r", ls="--", label=f"rmse {stats.rmse:.3f} m")
    a1.set_xlabel("pose" if timestamps is None else "time [s]")
    a1.set_ylabel("APE [m]")
    a1.legend(loc="best")
    for a in (a0, a1):
        a.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
