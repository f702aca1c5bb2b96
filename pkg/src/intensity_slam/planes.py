"""Plane feature points: ring-smoothness selection and RANSAC ground segmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import NoGround

GROUND = "ground"
GENERAL = "general"

N_SECTORS = 6
HALF_WINDOW = 5
# candidates above this smoothness are not plane points
SMOOTHNESS_MAX = 0.01
OCCLUSION_JUMP = 0.1  # relative range jump between ring neighbours
PARALLEL_JUMP = 0.02
GROUND_BAND = 0.5
GROUND_INLIER = 0.05
GROUND_MAX_TILT = math.radians(30.0)
MIN_GROUND_CANDIDATES = 50
SCORING_SUBSET = 4000


@dataclass(frozen=True)
class PlanePoint:
    position: np.ndarray
    kind: str


@dataclass(frozen=True)
class GroundModel:
    normal: np.ndarray  # unit, upward
    offset: float  # normal . x + offset = 0
    inlier_count: int

    def distance(self, pts):
        return np.asarray(pts, dtype=float) @ self.normal + self.offset


@numba.njit(cache=True)
def _smoothness(xyz, valid, out):
    rows, cols = valid.shape
    for r in range(rows):
        for c in range(cols):
            out[r, c] = np.inf
            if not valid[r, c]:
                continue
            x0, y0, z0 = xyz[r, c, 0], xyz[r, c, 1], xyz[r, c, 2]
            r0 = math.sqrt(x0 * x0 + y0 * y0 + z0 * z0)
            if r0 <= 0.0:
                continue
            ok = True
            ax = ay = az = 0.0
            prev_r = -1.0
            for s in range(-HALF_WINDOW, HALF_WINDOW + 1):
                j = (c + s) % cols
                if not valid[r, j]:
                    ok = False
                    break
                px, py, pz = xyz[r, j, 0], xyz[r, j, 1], xyz[r, j, 2]
                rj = math.sqrt(px * px + py * py + pz * pz)
                if prev_r >= 0.0 and abs(rj - prev_r) > OCCLUSION_JUMP * min(rj, prev_r):
                    ok = False
                    break
                prev_r = rj
                if s != 0:
                    ax += px - x0
                    ay += py - y0
                    az += pz - z0
            if not ok:
                continue
            rp = math.sqrt(xyz[r, c - 1, 0] ** 2 + xyz[r, c - 1, 1] ** 2 + xyz[r, c - 1, 2] ** 2)
            cn = (c + 1) % cols
            rn = math.sqrt(xyz[r, cn, 0] ** 2 + xyz[r, cn, 1] ** 2 + xyz[r, cn, 2] ** 2)
            if abs(rp - r0) > PARALLEL_JUMP * r0 and abs(rn - r0) > PARALLEL_JUMP * r0:
                continue
            out[r, c] = math.sqrt(ax * ax + ay * ay + az * az) / (2 * HALF_WINDOW * r0)


def smoothness(scan):
    """Per-cell smoothness ``|sum_j (x_j - x_i)| / (10 |x_i|)`` along each ring.

    Cells whose 10-neighbour window is incomplete, straddles an occlusion
    boundary, or that sit on a beam nearly parallel to the surface get ``inf``.
    """
    out = np.empty(scan.valid.shape)
    _smoothness(scan.xyz.astype(np.float64), scan.valid, out)
    return out


@numba.njit(cache=True)
def _pick(c, per_sector, n_sectors, half, limit, out):
    rows, cols = c.shape
    n = 0
    blocked = np.zeros((rows, cols), dtype=np.bool_)
    for s in range(n_sectors):
        c0 = (s * cols + n_sectors - 1) // n_sectors
        c1 = ((s + 1) * cols + n_sectors - 1) // n_sectors
        vals = c[:, c0:c1].copy().ravel()
        cand = np.flatnonzero(vals < limit)
        order = cand[np.argsort(vals[cand], kind="mergesort")]
        w = c1 - c0
        picked = 0
        for k in range(order.size):
            f = order[k]
            r = f // w
            j = f % w
            if blocked[r, c0 + j]:
                continue
            out[n] = r * cols + c0 + j
            n += 1
            picked += 1
            # spread picks along the ring
            for jj in range(max(c0, c0 + j - half), min(c1, c0 + j + half + 1)):
                blocked[r, jj] = True
            if picked >= per_sector:
                break
    return n


def general_plane_cells(scan, per_sector=20, exclude=None):
    """Flat cell indices of the ``per_sector`` smoothest cells in each of 6 azimuth sectors."""
    c = smoothness(scan)
    if exclude is not None:
        c[exclude] = np.inf
    out = np.empty(N_SECTORS * per_sector, dtype=np.int64)
    n = _pick(c, per_sector, N_SECTORS, HALF_WINDOW, SMOOTHNESS_MAX, out)
    return np.sort(out[:n])


def extract_general_planes(scan, per_sector=20, exclude=None):
    idx = general_plane_cells(scan, per_sector, exclude)
    pts = scan.xyz.reshape(-1, 3)[idx].astype(np.float64)
    return [PlanePoint(p, GENERAL) for p in pts]


def _fit_plane(pts):
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    n = vt[2]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return n, -float(n @ centroid)


def ground_cells(scan, height_prior, iterations=100, seed=42, threshold=GROUND_INLIER):
    """RANSAC ground plane; returns ``(GroundModel, flat cell indices of inliers)``."""
    flat_xyz = scan.xyz.reshape(-1, 3).astype(np.float64)
    flat_valid = scan.valid.reshape(-1)
    cand = np.flatnonzero(flat_valid & (np.abs(flat_xyz[:, 2] - height_prior) <= GROUND_BAND))
    if cand.size < MIN_GROUND_CANDIDATES:
        raise NoGround(f"only {cand.size} candidates near height {height_prior}")
    P = flat_xyz[cand]
    rng = np.random.default_rng(seed)
    score_set = P if len(P) <= SCORING_SUBSET else P[rng.choice(len(P), SCORING_SUBSET, replace=False)]
    samples = rng.integers(0, len(P), size=(iterations, 3))
    a, b, c = P[samples[:, 0]], P[samples[:, 1]], P[samples[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    good = norm > 1e-9
    if not good.any():
        raise NoGround("all RANSAC samples degenerate")
    n = n[good] / norm[good, None]
    d = -np.einsum("ij,ij->i", n, a[good])
    counts = (np.abs(score_set @ n.T + d) <= threshold).sum(axis=0)
    best = int(np.argmax(counts))
    normal, offset = n[best], d[best]
    if normal[2] < 0:
        normal, offset = -normal, -offset
    if math.acos(min(1.0, normal[2])) > GROUND_MAX_TILT:
        raise NoGround("winning plane is tilted more than 30 degrees from +z")
    # least-squares refinement on the consensus set, then a final exact recheck
    for _ in range(2):
        inl = np.abs(P @ normal + offset) <= threshold
        if inl.sum() < 3:
            raise NoGround("refinement lost the consensus set")
        normal, offset = _fit_plane(P[inl])
    if math.acos(min(1.0, normal[2])) > GROUND_MAX_TILT:
        raise NoGround("refined plane is tilted more than 30 degrees from +z")
    inl = np.abs(P @ normal + offset) <= threshold
    return GroundModel(normal, offset, int(inl.sum())), cand[inl]


def segment_ground(scan, height_prior, iterations=100, seed=42):
    model, idx = ground_cells(scan, height_prior, iterations, seed)
    pts = scan.xyz.reshape(-1, 3)[idx].astype(np.float64)
    return model, [PlanePoint(p, GROUND) for p in pts]


def voxel_downsample(pts, voxel):
    """Centroid of the points in each occupied voxel, in voxel-key order."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    keys = np.floor(pts / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inv, pts)
    return out / counts[:, None]


def extract_plane_points(scan, height_prior, per_sector=20, ground_voxel=0.4, iterations=100, seed=42):
    """Ground (downsampled) and general plane points of one scan, in the scan frame.

    Returns ``(ground_pts, general_pts, ground_model_or_None)``; the two point
    sets are disjoint because ground inliers are excluded from smoothness
    selection.
    """
    flat = scan.xyz.reshape(-1, 3).astype(np.float64)
    exclude = np.zeros(scan.valid.shape, dtype=bool)
    try:
        model, gidx = ground_cells(scan, height_prior, iterations, seed)
        exclude.reshape(-1)[gidx] = True
        ground = voxel_downsample(flat[gidx], ground_voxel)
    except NoGround:
        model, ground = None, np.zeros((0, 3))
    general = flat[general_plane_cells(scan, per_sector, exclude)]
    return ground, general, model
