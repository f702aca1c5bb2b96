import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intensity_slam.features import (
    CIRCLE,
    DESCRIPTOR_BITS,
    N_SECTORS,
    Feature,
    build_frame,
    describe,
    detect,
    hamming_matrix,
    match,
    segment_test,
)
from intensity_slam.intensity_image import NormalizationParams, project
from intensity_slam.scan_io import OrganizedScan

IDENTITY_NORM = NormalizationParams(cap=255)


def scan_from_pixels(pixels, valid=None):
    rows, cols = pixels.shape
    az = 2 * np.pi * np.arange(cols) / cols
    el = np.linspace(0.3, -0.3, rows)
    xyz = np.stack(
        [
            np.cos(el)[:, None] * np.cos(az)[None, :],
            np.cos(el)[:, None] * np.sin(az)[None, :],
            np.sin(el)[:, None] * np.ones(cols),
        ],
        axis=-1,
    ) * 10.0
    v = np.ones((rows, cols), bool) if valid is None else valid
    return OrganizedScan(xyz, pixels.astype(np.float32), v)


def frame_of(pixels, cap=200):
    scan = scan_from_pixels(pixels)
    img = project(scan, IDENTITY_NORM)
    return img, scan, detect(img, scan, cap=cap)


def hand_segment_test(P, r, c, t):
    """Plain-loop evaluation of the 16-pixel contiguous-arc test at one pixel."""
    rows, cols = P.shape
    ring = [int(P[r + dr, (c + dc) % cols]) for dr, dc in CIRCLE]
    centre = int(P[r, c])
    for sign in (1, -1):
        flags = [sign * (v - centre) > t for v in ring]
        run = best = 0
        for f in flags + flags:
            run = run + 1 if f else 0
            best = max(best, run)
        if best >= 9:
            return True
    return False


def test_uniform_image_has_no_features():
    _, _, feats = frame_of(np.full((64, 256), 120, np.uint8))
    assert feats == []


def test_single_bright_pixel():
    P = np.zeros((64, 256), np.uint8)
    P[30, 100] = 255
    img, scan, feats = frame_of(P)
    assert img.pixels[30, 100] == 255
    assert [f.pixel for f in feats] == [(30, 100)]
    assert all(hand_segment_test(P, r, c, 20) == (r == 30 and c == 100) for r in range(25, 36) for c in range(95, 106))


def test_segment_test_matches_hand_oracle(rng):
    P = rng.integers(0, 256, (20, 40)).astype(np.uint8)
    corner, _ = segment_test(P, 20)
    for r in range(3, 17):
        for c in range(40):
            assert corner[r, c] == hand_segment_test(P, r, c, 20)


def test_cap_with_many_corners():
    rng = np.random.default_rng(3)
    P = np.zeros((64, 1024), np.uint8)
    spots = [(r, c) for r in range(6, 60, 8) for c in range(4, 1024, 8)]
    assert len(spots) >= 500
    for r, c in spots:
        P[r, c] = rng.integers(60, 256)
    img, scan, feats = frame_of(P, cap=200)
    assert len(feats) == 200
    sectors = np.array([f.pixel[1] * N_SECTORS // 1024 for f in feats])
    assert np.bincount(sectors, minlength=N_SECTORS).tolist() == [25] * N_SECTORS
    # inside every sector the kept features are the strongest ones of that sector
    corner, response = segment_test(img.pixels, 20)
    for s in range(N_SECTORS):
        kept = sorted((f.response for f, k in zip(feats, sectors) if k == s), reverse=True)
        cols = np.arange(1024) * N_SECTORS // 1024 == s
        pool = np.sort(response[:, cols][corner[:, cols]])[::-1]
        assert kept[-1] >= pool[24]


def test_features_have_finite_points_and_skip_invalid():
    P = np.zeros((64, 256), np.uint8)
    P[30, 100] = 255
    P[30, 200] = 255
    valid = np.ones_like(P, bool)
    valid[30, 200] = False
    scan = scan_from_pixels(P, valid)
    img = project(scan, IDENTITY_NORM)
    feats = detect(img, scan)
    assert [f.pixel for f in feats] == [(30, 100)]
    assert all(np.all(np.isfinite(f.point3d)) and len(f.bits) == 256 for f in feats)


def textured(rng, rows=64, cols=256):
    return rng.integers(0, 256, (rows, cols)).astype(np.float64)


def test_identical_patches_identical_descriptors(rng):
    P = textured(rng)
    assert np.array_equal(describe(P, (32, 50)), describe(P.copy(), (32, 50)))


def test_half_turn_rotated_patch(rng):
    P = textured(rng)
    r, c = 32, 100
    Q = P.copy()
    patch = P[r - 15 : r + 16, c - 15 : c + 16]
    Q[r - 15 : r + 16, c - 15 : c + 16] = patch[::-1, ::-1]
    a = describe(P, (r, c))
    b = describe(Q, (r, c))
    assert hamming_matrix(a[None], b[None])[0, 0] == 0
    # without orientation handling the rotated copy looks unrelated
    raw = hamming_matrix(describe(P, (r, c), oriented=False)[None], describe(Q, (r, c), oriented=False)[None])
    assert raw[0, 0] > 64


def test_complement_flips_every_bit():
    # distinct values so no test compares equal pixels
    P = np.arange(64 * 256, dtype=np.float64).reshape(64, 256)
    P = np.random.default_rng(5).permutation(P.ravel()).reshape(64, 256) / (64 * 256) * 255
    a = describe(P, (32, 80), oriented=False)
    b = describe(255 - P, (32, 80), oriented=False)
    assert hamming_matrix(a[None], b[None])[0, 0] == DESCRIPTOR_BITS


def test_hamming_matches_popcount_oracle(rng):
    a = rng.integers(0, 256, (1000, 32)).astype(np.uint8)
    b = rng.integers(0, 256, (1000, 32)).astype(np.uint8)
    D = hamming_matrix(a, b)
    oracle = np.unpackbits(a ^ b, axis=1).sum(axis=1)
    assert np.array_equal(np.diag(D), oracle)
    full = np.unpackbits(a[:50, None, :] ^ b[None, :60, :], axis=2).sum(axis=2)
    assert np.array_equal(D[:50, :60], full)


def fake_features(desc):
    return [Feature((0, k), 1.0, d, np.zeros(3)) for k, d in enumerate(desc)]


def test_self_match(rng):
    feats = fake_features(rng.integers(0, 256, (100, 32)).astype(np.uint8))
    pairs = match(feats, feats)
    assert [(p.index_prev, p.index_curr) for p in pairs] == [(k, k) for k in range(100)]
    assert all(p.score == 1.0 for p in pairs)


def test_disjoint_random_sets_rarely_match(rng):
    total = 0
    for _ in range(20):
        a = fake_features(rng.integers(0, 256, (100, 32)).astype(np.uint8))
        b = fake_features(rng.integers(0, 256, (100, 32)).astype(np.uint8))
        total += len(match(a, b, max_hamming=30))
    assert total == 0


def test_single_pair_score():
    a = np.zeros(32, np.uint8)
    b = a.copy()
    b[0] = 0xFF
    b[1] = 0x03
    pairs = match(fake_features([a]), fake_features([b]), max_hamming=30)
    assert len(pairs) == 1 and pairs[0].hamming == 10
    assert abs(pairs[0].score - (1 - 10 / 256)) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40))
def test_matching_symmetric_and_one_to_one(seed, n, m):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, (max(n, m), 32)).astype(np.uint8)
    a = base[:n].copy()
    b = base[:m].copy()
    flips = rng.integers(0, 2, b.shape).astype(np.uint8) * (1 << rng.integers(0, 8, b.shape)).astype(np.uint8)
    b ^= flips
    fa, fb = fake_features(a), fake_features(b)
    ab = {(p.index_prev, p.index_curr) for p in match(fa, fb)}
    ba = {(p.index_curr, p.index_prev) for p in match(fb, fa)}
    assert ab == ba
    assert len({i for i, _ in ab}) == len(ab) == len({j for _, j in ab})
    for p in match(fa, fb):
        assert p.hamming <= 64 and p.score == 1 - p.hamming / 256


def test_detect_respects_cap_on_synthetic_scan(corridor_pair):
    scans = corridor_pair[0]
    for cap in (10, 50, 200):
        frame = build_frame(scans[0], cap=cap)
        assert 0 < len(frame.features) <= cap
