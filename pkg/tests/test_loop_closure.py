import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intensity_slam import synth
from intensity_slam.errors import FormatError, InsufficientCorpus
from intensity_slam.features import build_frame, hamming_matrix
from intensity_slam.geometry import Se3Pose
from intensity_slam.loop_closure import (
    BowVector,
    KeyframeDatabase,
    Vocabulary,
    bitwise_majority,
    similarity,
    train_vocabulary,
    verify,
)
from intensity_slam.odometry import register_matched
from intensity_slam.features import match_descriptors


def random_desc(rng, n):
    return rng.integers(0, 256, (n, 32)).astype(np.uint8)


def flip_bits(rng, desc, nbits):
    out = desc.copy()
    bits = np.unpackbits(out, axis=1)
    for row in bits:
        row[rng.choice(256, nbits, replace=False)] ^= 1
    return np.packbits(bits, axis=1)


def test_bitwise_majority_oracle(rng):
    d = random_desc(rng, 7)
    bits = np.unpackbits(d, axis=1)
    expect = np.packbits((bits.sum(axis=0) >= 4).astype(np.uint8))
    assert np.array_equal(bitwise_majority(d), expect)


def test_each_descriptor_its_own_word(rng):
    d = random_desc(rng, 8)
    vocab = train_vocabulary(d, branching=8, depth=1)
    assert sorted(vocab.words(d).tolist()) == list(range(8))


def test_two_clusters_give_majority_centroids(rng):
    a0 = np.zeros((1, 32), np.uint8)
    b0 = np.packbits(np.r_[np.ones(200), np.zeros(56)].astype(np.uint8))[None]
    assert hamming_matrix(a0, b0)[0, 0] == 200
    A = np.vstack([flip_bits(rng, a0, int(rng.integers(1, 11))) for _ in range(30)])
    B = np.vstack([flip_bits(rng, b0, int(rng.integers(1, 11))) for _ in range(30)])
    vocab = train_vocabulary(np.vstack([A, B]), branching=2, depth=1, seed=3)
    cents = {bytes(c) for c in vocab.levels[0]}
    assert cents == {bytes(bitwise_majority(A)), bytes(bitwise_majority(B))}
    wa, wb = vocab.words(A), vocab.words(B)
    assert len(set(wa)) == 1 and len(set(wb)) == 1 and wa[0] != wb[0]


def test_insufficient_corpus(rng):
    with pytest.raises(InsufficientCorpus):
        train_vocabulary(random_desc(rng, 99), branching=10, depth=2)


def test_vocabulary_deterministic_and_dense(rng):
    d = random_desc(rng, 600)
    v1 = train_vocabulary(d, 5, 2, seed=11)
    v2 = train_vocabulary(d, 5, 2, seed=11)
    assert all(np.array_equal(a, b) for a, b in zip(v1.levels, v2.levels))
    w = v1.words(d)
    assert np.array_equal(w, v1.words(d)) and w.min() >= 0 and w.max() < v1.word_count


def test_every_leaf_reached_by_nearest_descent(rng):
    vocab = train_vocabulary(random_desc(rng, 500), 4, 2, seed=1)
    leaves = vocab.levels[-1]
    b = vocab.branching
    for w in range(vocab.word_count):
        # a leaf is reachable iff descending with its own centroid lands on it,
        # unless it is a padded duplicate of a sibling
        got = vocab.words(leaves[w : w + 1])[0]
        sibling = (got // b) == (w // b) and np.array_equal(leaves[got], leaves[w])
        assert got == w or sibling


def test_vocabulary_file_roundtrip(tmp_path, rng):
    vocab = train_vocabulary([random_desc(rng, 50) for _ in range(6)], 3, 2, seed=2)
    p = tmp_path / "v.ivoc"
    vocab.save(p)
    assert p.read_bytes()[:4] == b"IVOC"
    back = Vocabulary.load(p)
    assert back.branching == 3 and back.depth == 2
    assert np.array_equal(back.idf, vocab.idf)
    d = random_desc(rng, 40)
    assert np.array_equal(back.words(d), vocab.words(d))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        Vocabulary.load(p)


def test_bow_is_l1_normalised(rng):
    vocab = train_vocabulary([random_desc(rng, 50) for _ in range(6)], 10, 2, seed=2)
    v = vocab.transform(random_desc(rng, 30))
    assert len(v) > 0
    assert all(w >= 0 for w in v.weights.values())
    assert abs(sum(v.weights.values()) - 1) < 1e-9


sparse_vectors = st.dictionaries(st.integers(0, 30), st.floats(0.01, 1.0), min_size=1, max_size=10).map(
    lambda d: BowVector({k: v / sum(d.values()) for k, v in d.items()})
)


@settings(max_examples=100, deadline=None)
@given(sparse_vectors, sparse_vectors)
def test_similarity_properties(a, b):
    assert abs(similarity(a, a) - 1) < 1e-12
    assert similarity(a, b) == pytest.approx(similarity(b, a), abs=1e-12)
    assert -1e-12 <= similarity(a, b) <= 1 + 1e-12


def test_query_rules():
    db = KeyframeDatabase(threshold=0.15)
    v = BowVector({1: 0.5, 2: 0.5})
    other = BowVector({3: 1.0})
    db.add(0, v)
    db.add(1, other)
    db.add(60, v)
    assert similarity(v, other) == 0
    assert db.query(v, current_id=70, gap=50) == [(0, 1.0)]
    assert db.query(v, current_id=50, gap=50) == []
    assert db.query(other, current_id=200, gap=50, top_n=3) == [(1, 1.0)]


@pytest.fixture(scope="module")
def loop_frames():
    world, poses = synth.scenario("loop", 200, 0.4)
    sensor = synth.SensorModel()
    base = poses[5]
    ahead = base @ Se3Pose(translation=(1.0, 0, 0))
    f0 = build_frame(synth.render_scan(world, sensor, base, seed=1))
    f1 = build_frame(synth.render_scan(world, sensor, ahead, seed=2))
    return f0, f1


def test_verify_self(loop_frames):
    f = loop_frames[0]
    cand = verify(f, f)
    ia, _, _ = match_descriptors(f.descriptors, f.descriptors)
    assert cand.accepted and cand.inlier_count == len(ia)
    assert cand.relative.rotation_angle() < 1e-9 and np.linalg.norm(cand.relative.t) < 1e-9


def test_verify_one_metre_offset(loop_frames):
    f0, f1 = loop_frames
    cand = verify(f1, f0)
    assert cand.accepted
    assert abs(np.linalg.norm(cand.relative.t) - 1.0) < 0.05
    assert cand.inlier_count >= 25
    # independent recheck of the returned pose against the matched points
    ia, ib, _ = match_descriptors(f0.descriptors, f1.descriptors)
    res = np.linalg.norm(cand.relative.inverse().transform_points(f0.points[ia]) - f1.points[ib], axis=1)
    assert np.sort(res)[: cand.inlier_count].mean() < 0.3


def test_verify_rejects_disjoint_scenes(loop_frames, corridor_pair):
    corridor = build_frame(corridor_pair[0][0])
    cand = verify(loop_frames[0], corridor)
    assert not cand.accepted
