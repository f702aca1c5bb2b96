"""Corner features, 256-bit oriented binary descriptors and Hamming matching.

The intensity image is a 360 degree panorama: columns wrap around, rows are
clamped. Detection is single scale (the image is only 64 rows tall).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .intensity_image import NormalizationParams, project

# 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock, as (drow, dcol)
CIRCLE = np.array(
    [
        (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
        (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
    ]
)
ARC_LENGTH = 9
N_SECTORS = 8
PATCH_RADIUS = 15
N_ORIENT_BINS = 12
DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8


def _arc_table():
    table = np.zeros(1 << 16, dtype=bool)
    masks = np.arange(1 << 16, dtype=np.uint32)
    bits = ((masks[:, None] >> np.arange(16, dtype=np.uint32)) & 1).astype(bool)
    doubled = np.concatenate([bits, bits], axis=1)
    run = np.zeros(len(masks), dtype=np.int32)
    best = np.zeros(len(masks), dtype=np.int32)
    for k in range(32):
        run = np.where(doubled[:, k], run + 1, 0)
        best = np.maximum(best, run)
    table[:] = best >= ARC_LENGTH
    return table


_ARC = _arc_table()


def _sample_pairs(seed=0x5EED):
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < DESCRIPTOR_BITS:
        a = np.rint(rng.normal(0.0, 31.0 / 5.0, size=2))
        b = np.rint(rng.normal(0.0, 31.0 / 5.0, size=2))
        # radius 13 keeps every rotated copy inside the 31x31 patch
        if np.hypot(*a) > 13 or np.hypot(*b) > 13 or np.array_equal(a, b):
            continue
        pairs.append((a[0], a[1], b[0], b[1]))
    return np.array(pairs, dtype=np.float64)  # columns: a_dcol, a_drow, b_dcol, b_drow


def _rotated_pair_tables(pairs):
    tables = np.empty((N_ORIENT_BINS, len(pairs), 4), dtype=np.int64)
    half = N_ORIENT_BINS // 2
    for b in range(half):
        ang = 2.0 * math.pi * b / N_ORIENT_BINS
        c, s = math.cos(ang), math.sin(ang)
        out = np.empty_like(pairs)
        for k in (0, 2):
            x, y = pairs[:, k], pairs[:, k + 1]
            out[:, k] = c * x - s * y
            out[:, k + 1] = s * x + c * y
        tables[b] = np.rint(out).astype(np.int64)
        # a half-turn is an exact negation; build it that way so it stays exact
        tables[b + half] = -tables[b]
    return tables


PAIRS = _sample_pairs()
PAIR_TABLES = _rotated_pair_tables(PAIRS)

_pr, _pc = np.mgrid[-PATCH_RADIUS : PATCH_RADIUS + 1, -PATCH_RADIUS : PATCH_RADIUS + 1]
_disk = _pr**2 + _pc**2 <= PATCH_RADIUS**2
DISK_DROW = _pr[_disk]
DISK_DCOL = _pc[_disk]


@dataclass(eq=False)
class Feature:
    pixel: tuple
    response: float
    descriptor: np.ndarray  # 32 packed bytes
    point3d: np.ndarray

    @property
    def bits(self):
        return np.unpackbits(self.descriptor)


@dataclass(frozen=True)
class MatchPair:
    index_prev: int
    index_curr: int
    hamming: int
    score: float


@dataclass(eq=False)
class IntensityFrame:
    """Intensity image plus detected features (with 3D points) of one scan."""

    scan: object
    image: object
    features: list
    descriptors: np.ndarray = field(default=None)
    points: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.descriptors is None:
            self.descriptors = descriptor_matrix(self.features)
        if self.points is None:
            self.points = (
                np.array([f.point3d for f in self.features], dtype=np.float64).reshape(-1, 3)
            )

    @property
    def timestamp(self):
        return self.scan.timestamp

    def __len__(self):
        return len(self.features)


def descriptor_matrix(features):
    if len(features) == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return np.stack([np.asarray(f.descriptor, dtype=np.uint8) for f in features])


def segment_test(pixels, threshold):
    """Corner mask and response for the interior rows of ``pixels``.

    Returns ``(corner, response)`` full-size arrays; rows closer than 3 to the
    top/bottom border are never corners.
    """
    P = pixels.astype(np.int16)
    rows, cols = P.shape
    corner = np.zeros((rows, cols), dtype=bool)
    response = np.zeros((rows, cols), dtype=np.float64)
    if rows < 7:
        return corner, response
    center = P[3 : rows - 3]
    ring = np.empty((16,) + center.shape, dtype=np.int16)
    for k, (dr, dc) in enumerate(CIRCLE):
        ring[k] = np.roll(P, -dc, axis=1)[3 + dr : rows - 3 + dr]
    weights = (1 << np.arange(16, dtype=np.uint32))[:, None, None]
    bright = ring > center + threshold
    dark = ring < center - threshold
    bmask = (bright * weights).sum(axis=0, dtype=np.uint32)
    dmask = (dark * weights).sum(axis=0, dtype=np.uint32)
    is_corner = _ARC[bmask] | _ARC[dmask]
    rr, cc = np.nonzero(is_corner)
    if rr.size:
        vals = ring[:, rr, cc].astype(np.float64)
        cv = center[rr, cc].astype(np.float64)
        sb = np.maximum(vals - cv - threshold, 0.0).sum(axis=0)
        sd = np.maximum(cv - vals - threshold, 0.0).sum(axis=0)
        response[rr + 3, cc] = np.maximum(sb, sd)
        corner[rr + 3, cc] = True
    return corner, response


def _circle_all_valid(valid):
    rows = valid.shape[0]
    ok = np.zeros_like(valid)
    if rows < 7:
        return ok
    acc = valid[3 : rows - 3].copy()
    for dr, dc in CIRCLE:
        acc &= np.roll(valid, -dc, axis=1)[3 + dr : rows - 3 + dr]
    ok[3 : rows - 3] = acc
    return ok


def _select(rr, cc, resp, cols, cap):
    """Sector-bucketed top-``cap`` selection; deterministic on ties."""
    order = np.lexsort((cc, rr, -resp))
    rr, cc, resp = rr[order], cc[order], resp[order]
    n = len(resp)
    if n <= cap:
        return rr, cc, resp
    sector = (cc * N_SECTORS) // cols
    quota = np.full(N_SECTORS, cap // N_SECTORS)
    quota[: cap % N_SECTORS] += 1
    taken = np.zeros(n, dtype=bool)
    for s in range(N_SECTORS):
        idx = np.flatnonzero(sector == s)[: quota[s]]
        taken[idx] = True
    short = cap - int(taken.sum())
    if short > 0:
        taken[np.flatnonzero(~taken)[:short]] = True
    keep = np.flatnonzero(taken)
    return rr[keep], cc[keep], resp[keep]


def orientation_bins(pixels, rr, cc):
    """Intensity-centroid orientation quantized to 12 bins of 30 degrees."""
    rows, cols = pixels.shape
    r = np.clip(rr[:, None] + DISK_DROW[None, :], 0, rows - 1)
    c = (cc[:, None] + DISK_DCOL[None, :]) % cols
    vals = pixels[r, c].astype(np.float64)
    m10 = vals @ DISK_DCOL.astype(np.float64)
    m01 = vals @ DISK_DROW.astype(np.float64)
    ang = np.arctan2(m01, m10)
    return np.floor(ang / (2.0 * math.pi / N_ORIENT_BINS) + 0.5).astype(np.int64) % N_ORIENT_BINS


def describe_many(pixels, rr, cc, oriented=True):
    rows, cols = pixels.shape
    rr = np.asarray(rr, dtype=np.int64)
    cc = np.asarray(cc, dtype=np.int64)
    if rr.size == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    bins = orientation_bins(pixels, rr, cc) if oriented else np.zeros(len(rr), dtype=np.int64)
    tab = PAIR_TABLES[bins]  # (N, 256, 4)
    ra = np.clip(rr[:, None] + tab[:, :, 1], 0, rows - 1)
    ca = (cc[:, None] + tab[:, :, 0]) % cols
    rb = np.clip(rr[:, None] + tab[:, :, 3], 0, rows - 1)
    cb = (cc[:, None] + tab[:, :, 2]) % cols
    bits = pixels[ra, ca] < pixels[rb, cb]
    return np.packbits(bits, axis=1)


def describe(img, f, oriented=True):
    pixels = img.pixels if hasattr(img, "pixels") else np.asarray(img)
    r, c = f.pixel if hasattr(f, "pixel") else f
    return describe_many(pixels, np.array([r]), np.array([c]), oriented=oriented)[0]


def detect(img, scan, cap=200, threshold=20):
    """Detect up to ``cap`` corner features with descriptors and 3D points."""
    pixels = img.pixels
    rows, cols = pixels.shape
    corner, response = segment_test(pixels, threshold)
    # corners touching a no-return pixel sit on depth/validity silhouettes
    corner &= _circle_all_valid(img.index_map >= 0)
    response[~corner] = 0.0
    peak = maximum_filter(response, size=3, mode=("nearest", "wrap"))
    keep = corner & (response >= peak)
    rr, cc = np.nonzero(keep)
    if rr.size == 0:
        return []
    rr, cc, resp = _select(rr, cc, response[rr, cc], cols, cap)
    desc = describe_many(smooth_for_description(pixels), rr, cc)
    flat = img.index_map[rr, cc]
    pts = scan.xyz.reshape(-1, 3)[flat].astype(np.float64)
    out = []
    for k in range(len(rr)):
        if flat[k] < 0 or not np.all(np.isfinite(pts[k])):
            continue
        out.append(Feature((int(rr[k]), int(cc[k])), float(resp[k]), desc[k], pts[k]))
    return out


def smooth_for_description(pixels):
    """5x5 box average; binary tests on raw pixels flip on single-pixel noise and aliasing."""
    return uniform_filter(np.asarray(pixels, dtype=np.float64), size=5, mode=("nearest", "wrap"))


def build_frame(scan, cap=200, threshold=20, norm=NormalizationParams()):
    img = project(scan, norm)
    return IntensityFrame(scan, img, detect(img, scan, cap=cap, threshold=threshold))


def hamming_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.uint8)
    b = np.ascontiguousarray(b, dtype=np.uint8)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    av = a.view(np.uint64)
    bv = b.view(np.uint64)
    c = np.bitwise_count(av[:, None, :] ^ bv[None, :, :])
    # lane sums of two 64-bit words fit in uint8; widen before the final add
    return (c[..., 0] + c[..., 1]).astype(np.int64) + (c[..., 2] + c[..., 3])


def _best_two(D, axis):
    if D.shape[axis] == 1:
        best = np.argmin(D, axis=axis)
        return best, np.take_along_axis(D, np.expand_dims(best, axis), axis).squeeze(axis), None
    part = np.argpartition(D, 1, axis=axis)
    i0 = np.take(part, 0, axis=axis)
    i1 = np.take(part, 1, axis=axis)
    d0 = np.take_along_axis(D, np.expand_dims(i0, axis), axis).squeeze(axis)
    d1 = np.take_along_axis(D, np.expand_dims(i1, axis), axis).squeeze(axis)
    swap = d1 < d0
    best = np.where(swap, i1, i0)
    return best, np.minimum(d0, d1), np.maximum(d0, d1)


def match_descriptors(a, b, max_hamming=64, ratio=0.8):
    """Mutual nearest neighbours with a two-sided ratio test.

    Returns index arrays ``(ia, ib, dist)``.
    """
    D = hamming_matrix(a, b)
    if D.size == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy(), e.copy()
    best_b, d_ab, second_ab = _best_two(D, axis=1)
    best_a, d_ba, second_ba = _best_two(D, axis=0)
    ia = np.arange(D.shape[0])
    ok = best_a[best_b] == ia
    ok &= d_ab <= max_hamming
    if second_ab is not None:
        ok &= d_ab < ratio * second_ab
    if second_ba is not None:
        ok &= d_ba[best_b] < ratio * second_ba[best_b]
    ia = ia[ok]
    ib = best_b[ok]
    return ia, ib, d_ab[ok]


def match(prev, curr, max_hamming=64, ratio=0.8):
    da = prev.descriptors if isinstance(prev, IntensityFrame) else descriptor_matrix(prev)
    db = curr.descriptors if isinstance(curr, IntensityFrame) else descriptor_matrix(curr)
    ia, ib, d = match_descriptors(da, db, max_hamming, ratio)
    return [
        MatchPair(int(i), int(j), int(h), 1.0 - int(h) / DESCRIPTOR_BITS) for i, j, h in zip(ia, ib, d)
    ]


def match_scores(dist):
    return 1.0 - np.asarray(dist, dtype=np.float64) / DESCRIPTOR_BITS
