"""Bag-of-binary-words place recognition and geometric loop verification."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, FormatError, InsufficientCorpus, InsufficientMatches
from .features import DESCRIPTOR_BYTES, hamming_matrix, match_descriptors, match_scores
from .geometry import Se3Pose
from .odometry import register_matched

VOCAB_MAGIC = b"IVOC"
VOCAB_VERSION = 1
_VHEADER = struct.Struct("<4sIII")
KMEDIANS_ITERS = 20


def bitwise_majority(desc):
    """Per-bit majority of packed descriptors; ties resolve to 0."""
    bits = np.unpackbits(np.asarray(desc, dtype=np.uint8), axis=1)
    ones = bits.sum(axis=0, dtype=np.int64)
    return np.packbits((2 * ones > len(bits)).astype(np.uint8))


def _seed_centroids(desc, k, rng):
    """k-means++ style seeding under the Hamming metric."""
    n = len(desc)
    first = int(rng.integers(n))
    chosen = [first]
    d = hamming_matrix(desc, desc[first : first + 1])[:, 0].astype(float)
    while len(chosen) < k:
        total = float((d * d).sum())
        if total == 0.0:
            break  # fewer distinct descriptors than clusters
        nxt = int(rng.choice(n, p=d * d / total))
        chosen.append(nxt)
        d = np.minimum(d, hamming_matrix(desc, desc[nxt : nxt + 1])[:, 0])
    return desc[chosen].copy()


def kmedians(desc, k, rng):
    """Hamming k-medians; returns ``(centroids, labels)`` with ``len(centroids) <= k``."""
    cent = _seed_centroids(desc, k, rng)
    labels = np.argmin(hamming_matrix(desc, cent), axis=1)
    for _ in range(KMEDIANS_ITERS):
        for j in range(len(cent)):
            members = desc[labels == j]
            if len(members):
                cent[j] = bitwise_majority(members)
        new = np.argmin(hamming_matrix(desc, cent), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return cent, labels


class Vocabulary:
    """Complete ``b``-ary tree of depth ``d``; leaves are words ``0 .. b**d - 1``.

    ``levels[l]`` holds the ``b**(l+1)`` centroids of depth ``l + 1``; the
    children of node ``n`` at one level are ``n*b .. n*b + b - 1`` at the next.
    """

    def __init__(self, branching, depth, levels, idf):
        self.branching = int(branching)
        self.depth = int(depth)
        self.levels = [np.ascontiguousarray(c, dtype=np.uint8) for c in levels]
        self.idf = np.asarray(idf, dtype=np.float64)
        if len(self.idf) != self.word_count:
            raise FormatError("idf table size does not match the tree")

    @property
    def word_count(self):
        return self.branching**self.depth

    def words(self, desc):
        desc = np.asarray(desc, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        node = np.zeros(len(desc), dtype=np.int64)
        if len(desc) == 0:
            return node
        b = self.branching
        av = desc.view(np.uint64)
        for cent in self.levels:
            kids = node[:, None] * b + np.arange(b)
            cv = cent.view(np.uint64)[kids]  # (M, b, 4)
            d = np.bitwise_count(av[:, None, :] ^ cv).sum(axis=2)
            node = kids[np.arange(len(desc)), np.argmin(d, axis=1)]
        return node

    def transform(self, desc):
        """L1-normalized tf-idf ``BowVector`` of one frame's descriptors."""
        w = self.words(desc)
        if len(w) == 0:
            return BowVector({})
        ids, counts = np.unique(w, return_counts=True)
        vals = counts / len(w) * self.idf[ids]
        keep = vals > 0
        ids, vals = ids[keep], vals[keep]
        total = vals.sum()
        if total <= 0:
            return BowVector({})
        return BowVector({int(i): float(v / total) for i, v in zip(ids, vals)})

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_VHEADER.pack(VOCAB_MAGIC, VOCAB_VERSION, self.branching, self.depth))
            for c in self.levels:
                fh.write(c.tobytes())
            fh.write(self.idf.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if len(data) < _VHEADER.size:
            raise FormatError(f"{path}: truncated vocabulary header")
        magic, version, b, d = _VHEADER.unpack_from(data)
        if magic != VOCAB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VOCAB_VERSION:
            raise FormatError(f"{path}: unsupported vocabulary version {version}")
        off = _VHEADER.size
        levels = []
        for lvl in range(1, d + 1):
            n = b**lvl * DESCRIPTOR_BYTES
            if off + n > len(data):
                raise FormatError(f"{path}: truncated centroid table")
            levels.append(np.frombuffer(data, np.uint8, n, off).reshape(-1, DESCRIPTOR_BYTES).copy())
            off += n
        if len(data) - off != 8 * b**d:
            raise FormatError(f"{path}: idf table has wrong size")
        idf = np.frombuffer(data, "<f8", b**d, off).copy()
        return cls(b, d, levels, idf)


def train_vocabulary(corpus, branching=10, depth=3, seed=0):
    """Hierarchical Hamming k-medians over a descriptor corpus.

    ``corpus`` is either one ``(N, 32)`` array or a list of per-frame arrays;
    with frames the idf weights are ``log(frames / frames containing word)``,
    otherwise descriptors stand in for documents. Clusters too small to split
    are padded by repeating their last centroid, so padded words are never
    reached by the nearest-child descent.
    """
    if isinstance(corpus, np.ndarray):
        desc = np.asarray(corpus, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        doc_of = np.arange(len(desc))
    else:
        docs = [np.asarray(d, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES) for d in corpus]
        desc = np.vstack(docs) if docs else np.zeros((0, DESCRIPTOR_BYTES), np.uint8)
        doc_of = np.repeat(np.arange(len(docs)), [len(d) for d in docs])
    b, d = int(branching), int(depth)
    if b < 2 or d < 1:
        raise ValueError("branching must be >= 2 and depth >= 1")
    if len(desc) < b**d:
        raise InsufficientCorpus(f"{len(desc)} descriptors < {b}^{d} = {b**d}")
    rng = np.random.default_rng(seed)
    levels = [np.zeros((b ** (lvl + 1), DESCRIPTOR_BYTES), np.uint8) for lvl in range(d)]
    members = [np.arange(len(desc))]
    for lvl in range(d):
        nxt = []
        for node, idx in enumerate(members):
            sub = desc[idx]
            base = node * b
            if len(sub) == 0:
                # unreachable subtree: copy the parent centroid
                parent = levels[lvl - 1][node] if lvl else np.zeros(DESCRIPTOR_BYTES, np.uint8)
                levels[lvl][base : base + b] = parent
                nxt.extend([idx[:0]] * b)
                continue
            cent, labels = kmedians(sub, b, rng)
            k = len(cent)
            levels[lvl][base : base + k] = cent
            levels[lvl][base + k : base + b] = cent[-1]
            for j in range(b):
                nxt.append(idx[labels == j] if j < k else idx[:0])
        members = nxt
    vocab = Vocabulary(b, d, levels, np.zeros(b**d))
    W = b**d
    n_docs = len(np.unique(doc_of))
    pairs = np.unique(doc_of * W + vocab.words(desc))
    df = np.bincount(pairs % W, minlength=W).astype(float)
    seen = df > 0
    vocab.idf[seen] = np.log(n_docs / df[seen])
    return vocab


@dataclass
class BowVector:
    weights: dict

    def __len__(self):
        return len(self.weights)


def similarity(v1, v2):
    """``1 - 0.5 * |v1 - v2|_1``; 0 when either vector is empty."""
    a, b = v1.weights, v2.weights
    if not a or not b:
        return 0.0
    diff = 0.0
    for k, w in a.items():
        diff += abs(w - b.get(k, 0.0))
    for k, w in b.items():
        if k not in a:
            diff += w
    return 1.0 - 0.5 * diff


@dataclass
class LoopCandidate:
    query_id: int
    match_id: int
    similarity: float
    relative: Se3Pose = None  # pose of the query keyframe in the match keyframe's frame
    inlier_count: int = 0
    mean_residual: float = math.inf
    accepted: bool = False


class KeyframeDatabase:
    """Append-only store of keyframe bag-of-words vectors."""

    def __init__(self, threshold=0.15):
        self.threshold = threshold
        self.entries = []  # (id, BowVector)

    def add(self, kf_id, bow):
        if self.entries and kf_id <= self.entries[-1][0]:
            raise ValueError("keyframe ids must increase")
        self.entries.append((int(kf_id), bow))

    def __len__(self):
        return len(self.entries)

    def query(self, bow, current_id, gap=50, top_n=1):
        """Entries older than ``current_id - gap`` above the threshold, best first."""
        limit = current_id - gap
        scored = [(kid, similarity(bow, v)) for kid, v in self.entries if kid < limit]
        scored = [(k, s) for k, s in scored if s >= self.threshold]
        scored.sort(key=lambda t: (-t[1], t[0]))
        return scored[:top_n]


def query(db, bow, current_id, gap=50, top_n=1):
    return db.query(bow, current_id, gap, top_n)


def verify(query_frame, candidate_frame, min_inliers=25, max_residual=0.3, max_hamming=64, ratio=0.8,
           query_id=-1, match_id=-1, sim=0.0):
    """Descriptor matching plus weighted registration; rejection is a non-accepted candidate."""
    cand = LoopCandidate(query_id, match_id, sim)
    ia, ib, dist = match_descriptors(candidate_frame.descriptors, query_frame.descriptors, max_hamming, ratio)
    try:
        est = register_matched(candidate_frame.points[ia], query_frame.points[ib], match_scores(dist),
                               min_matches=max(3, min_inliers))
    except (InsufficientMatches, DegenerateConfiguration):
        return cand
    cand.inlier_count = est.inlier_count
    cand.mean_residual = est.mean_residual
    cand.relative = est.relative.inverse()
    cand.accepted = est.inlier_count >= min_inliers and est.mean_residual < max_residual
    return cand
