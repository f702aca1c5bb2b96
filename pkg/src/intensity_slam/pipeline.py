"""Three-stage pipeline: intensity odometry, map optimization, pose graph.

Each stage consumes the previous stage's output in scan order. In serial mode
the stages run back to back per scan; in parallel mode each stage runs in its
own thread connected by bounded queues. No stage reads state written by a
later stage, so both modes produce identical results.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .features import build_frame
from .geometry import Se3Pose, rotz
from .intensity_image import NormalizationParams
from .loop_closure import KeyframeDatabase, Vocabulary, train_vocabulary, verify
from .mapping import MapOptimizer
from .odometry import IntensityOdometry, OdometryEstimate
from .planes import extract_plane_points
from .pose_graph import PoseGraph, maybe_keyframe
from .scan_io import TrajectoryRecord, write_trajectory

log = logging.getLogger(__name__)

STAGES = ("front_end", "planes", "map_optimization", "pose_graph")
QUEUE_DEPTH = 4


@dataclass
class FrameSummary:
    """What the pose graph keeps of a keyframe's features."""

    descriptors: np.ndarray
    points: np.ndarray
    timestamp: float


@dataclass
class ScanRecord:
    index: int
    timestamp: float
    odometry_pose: Se3Pose = None
    mapping_pose: Se3Pose = None
    published_pose: Se3Pose = None
    keyframe_id: int = -1
    relative_to_keyframe: Se3Pose = None
    match_count: int = 0
    odometry_fallback: bool = False
    mapping_fallback: bool = False
    is_keyframe: bool = False
    timings: dict = field(default_factory=dict)


@dataclass
class LoopEvent:
    scan_index: int
    query_id: int
    match_id: int
    similarity: float
    inlier_count: int
    mean_residual: float
    accepted: bool


class _FrontEndOut:
    __slots__ = ("record", "frame", "estimate")

    def __init__(self, record, frame, estimate):
        self.record = record
        self.frame = frame
        self.estimate = estimate


class Pipeline:
    def __init__(self, config=None, vocabulary=None):
        self.cfg = (config or Config()).validate()
        cfg = self.cfg
        self.norm = NormalizationParams(cfg.intensity_cap, cfg.row_gain_equalization)
        self.odometry = IntensityOdometry(cfg.min_matches, cfg.max_hamming, cfg.match_ratio)
        self.mapper = MapOptimizer(
            window_size=cfg.ba_window,
            local_map_radius=cfg.local_map_radius,
            huber_delta=cfg.huber_delta,
            max_hamming=cfg.max_hamming,
            ratio=cfg.match_ratio,
            use_ba=cfg.use_ba,
        )
        self.graph = PoseGraph()
        self.db = KeyframeDatabase(cfg.loop_sim_threshold)
        self.vocabulary = vocabulary
        if self.vocabulary is None and cfg.vocabulary:
            self.vocabulary = Vocabulary.load(cfg.vocabulary)
        self.records = []
        self.loop_events = []
        # front-end state
        self._prev_frame = None
        self._odom_pose = Se3Pose.identity()
        # mapping state
        self._map_pose = None
        # pose-graph state
        self._anchor = Se3Pose.identity()
        self._travel = 0.0
        self._drift_pose = None
        self._last_map_pose = None
        self._kf_initial = []

    # ------------------------------------------------------------ stages

    def front_end(self, index, scan):
        t0 = time.perf_counter()
        frame = build_frame(scan, self.cfg.feature_cap, self.cfg.fast_threshold, self.norm)
        if self._prev_frame is None:
            est = OdometryEstimate(Se3Pose.identity(), len(frame.features), 0.0, len(frame.features))
        else:
            est = self.odometry.advance(self._prev_frame, frame)
        self._prev_frame = frame
        self._odom_pose = self._odom_pose @ est.relative
        rec = ScanRecord(index, scan.timestamp, odometry_pose=self._odom_pose, match_count=est.match_count)
        rec.odometry_fallback = bool(est.low_confidence)
        rec.timings["front_end"] = (time.perf_counter() - t0) * 1e3
        return _FrontEndOut(rec, frame, est)

    def mapping(self, fe):
        cfg = self.cfg
        rec = fe.record
        t0 = time.perf_counter()
        if self._map_pose is None:
            init = Se3Pose.identity()
        elif cfg.use_intensity_odometry:
            init = self._map_pose @ fe.estimate.relative
        else:
            init = self._map_pose
        ground, general, _ = extract_plane_points(
            fe.frame.scan, cfg.height_prior, cfg.plane_per_sector, cfg.ground_voxel, cfg.ransac_iterations, cfg.ransac_seed
        )
        t1 = time.perf_counter()
        pose = init
        if cfg.use_map_optimization:
            res = self.mapper.process(init, fe.frame, np.vstack([ground, general]))
            pose = res.pose
            rec.mapping_fallback = bool(res.fallback) and rec.index > 0
            if not pose.is_finite():
                log.warning("scan %d: non-finite optimized pose, keeping the initial guess", rec.index)
                pose = init
                rec.mapping_fallback = True
        self._map_pose = pose
        rec.mapping_pose = pose
        t2 = time.perf_counter()
        rec.timings["planes"] = (t1 - t0) * 1e3
        rec.timings["map_optimization"] = (t2 - t1) * 1e3
        return fe

    def _drifted(self, m):
        """Mapping pose with drift accumulated step by step in the body frame."""
        cfg = self.cfg
        if self._last_map_pose is None:
            self._drift_pose = m
            return m
        step = self._last_map_pose.inverse() @ m
        ds = float(np.linalg.norm(step.t))
        self._travel += ds
        if cfg.drift_translation_rate == 0.0 and cfg.drift_yaw_rate == 0.0:
            return m
        bias = Se3Pose(rotz(cfg.drift_yaw_rate * ds).quaternion, (cfg.drift_translation_rate * ds, 0.0, 0.0))
        self._drift_pose = self._drift_pose @ step @ bias
        return self._drift_pose

    def back_end(self, fe):
        cfg = self.cfg
        rec = fe.record
        t0 = time.perf_counter()
        m = rec.mapping_pose
        drifted = self._drifted(m)
        self._last_map_pose = m
        published = self._anchor @ drifted
        if maybe_keyframe(published, self.graph.latest, rec.match_count, cfg):
            rec.is_keyframe = True
            bow = None
            if cfg.use_loop_closure and self.vocabulary is not None:
                bow = self.vocabulary.transform(fe.frame.descriptors)
            summary = FrameSummary(fe.frame.descriptors, fe.frame.points, rec.timestamp)
            kf = self.graph.add_keyframe(published, summary, bow, rec.timestamp, rec.index)
            self._kf_initial.append(TrajectoryRecord(rec.timestamp, published))
            if bow is not None:
                hits = self.db.query(bow, kf.id, cfg.loop_gap, top_n=1)
                if hits:
                    cid, sim = hits[0]
                    cand = verify(
                        summary,
                        self.graph.keyframes[cid].frame,
                        cfg.loop_min_inliers,
                        cfg.loop_max_residual,
                        cfg.max_hamming,
                        cfg.match_ratio,
                        query_id=kf.id,
                        match_id=cid,
                        sim=sim,
                    )
                    self.loop_events.append(
                        LoopEvent(rec.index, kf.id, cid, sim, cand.inlier_count, cand.mean_residual, cand.accepted)
                    )
                    if cand.accepted:
                        delta = self.graph.on_loop(cand)
                        self._anchor = delta @ self._anchor
                        published = delta @ published
                        log.info("loop closed: keyframe %d -> %d (%d inliers)", kf.id, cid, cand.inlier_count)
                self.db.add(kf.id, bow)
        latest = self.graph.latest
        rec.published_pose = published
        rec.keyframe_id = latest.id
        rec.relative_to_keyframe = latest.pose.inverse() @ published
        rec.timings["pose_graph"] = (time.perf_counter() - t0) * 1e3
        rec.timings["total"] = sum(rec.timings[s] for s in STAGES)
        self.records.append(rec)
        return rec

    # ------------------------------------------------------------ drivers

    def prepare_vocabulary(self, scans, seed=0):
        """Train a vocabulary on the sequence's own descriptors when none was given."""
        if self.vocabulary is not None or not self.cfg.use_loop_closure:
            return self.vocabulary
        docs = [build_frame(s, self.cfg.feature_cap, self.cfg.fast_threshold, self.norm).descriptors for s in scans]
        self.vocabulary = train_vocabulary(docs, self.cfg.vocab_branching, self.cfg.vocab_depth, seed)
        return self.vocabulary

    def process(self, index, scan):
        return self.back_end(self.mapping(self.front_end(index, scan)))

    def run(self, scans, mode="serial"):
        if mode == "serial":
            for k, scan in enumerate(scans):
                self.process(k, scan)
        elif mode == "parallel":
            self._run_parallel(scans)
        else:
            raise ValueError(f"unknown pipeline mode {mode!r}")
        return self.result()

    def _run_parallel(self, scans):
        q1 = queue.Queue(QUEUE_DEPTH)
        q2 = queue.Queue(QUEUE_DEPTH)
        errors = []
        done = object()

        def stage(fn, src, dst):
            try:
                for item in src:
                    if item is done:
                        break
                    dst.put(fn(item))
            except BaseException as exc:  # surfaced in the caller
                errors.append(exc)
            finally:
                dst.put(done)

        def source():
            for k, scan in enumerate(scans):
                yield (k, scan)
            yield done

        def drain(q):
            while True:
                yield q.get()

        t1 = threading.Thread(target=stage, args=(lambda ks: self.front_end(*ks), source(), q1), daemon=True)
        t2 = threading.Thread(target=stage, args=(self.mapping, drain(q1), q2), daemon=True)
        t1.start()
        t2.start()
        try:
            while True:
                item = q2.get()
                if item is done:
                    break
                self.back_end(item)
        finally:
            t1.join()
            t2.join()
        if errors:
            raise errors[0]

    def result(self):
        return RunResult(self)


class RunResult:
    def __init__(self, pipe):
        self.cfg = pipe.cfg
        self.records = list(pipe.records)
        self.graph = pipe.graph
        self.loop_events = list(pipe.loop_events)
        self.keyframes_initial = list(pipe._kf_initial)
        self.mapper = pipe.mapper

    @property
    def loops_accepted(self):
        return sum(1 for e in self.loop_events if e.accepted)

    def trajectory(self, kind="final"):
        recs = self.records
        if kind == "odometry":
            return [TrajectoryRecord(r.timestamp, r.odometry_pose) for r in recs]
        if kind == "mapping":
            return [TrajectoryRecord(r.timestamp, r.mapping_pose) for r in recs]
        if kind == "published":
            return [TrajectoryRecord(r.timestamp, r.published_pose) for r in recs]
        if kind == "keyframes_initial":
            return list(self.keyframes_initial)
        if kind == "keyframes":
            return [TrajectoryRecord(k.timestamp, k.pose) for k in self.graph.keyframes]
        if kind == "final":
            kfs = self.graph.keyframes
            return [TrajectoryRecord(r.timestamp, kfs[r.keyframe_id].pose @ r.relative_to_keyframe) for r in recs]
        raise ValueError(f"unknown trajectory kind {kind!r}")

    def timing_stats(self):
        out = {}
        for name in STAGES + ("total",):
            v = np.array([r.timings.get(name, 0.0) for r in self.records])
            out[name] = (float(v.mean()) if len(v) else 0.0, float(v.std()) if len(v) else 0.0)
        return out

    def summary(self):
        ts = self.timing_stats()
        s = {
            "scans": len(self.records),
            "keyframes": len(self.graph.keyframes),
            "loop_candidates": len(self.loop_events),
            "loops_accepted": self.loops_accepted,
            "odometry_fallbacks": sum(r.odometry_fallback for r in self.records),
            "mapping_fallbacks": sum(r.mapping_fallback for r in self.records),
            "map_points": len(self.mapper.tree),
        }
        for name, (m, sd) in ts.items():
            s[f"{name}_ms"] = f"{m:.2f} +- {sd:.2f}"
        return s

    def write(self, out_dir, plot=True):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for kind, fname in (
            ("odometry", "odometry.txt"),
            ("mapping", "mapping.txt"),
            ("keyframes_initial", "keyframes_initial.txt"),
            ("keyframes", "keyframes.txt"),
            ("final", "final.txt"),
        ):
            write_trajectory(self.trajectory(kind), out / fname)
        self.mapper.tree.dump_xyz(out / "map.xyz")
        self.graph.dump(out / "pose_graph.g2o")
        with open(out / "timings.csv", "w", encoding="utf-8") as fh:
            fh.write("index,timestamp," + ",".join(STAGES) + ",total\n")
            for r in self.records:
                vals = ",".join(f"{r.timings.get(k, 0.0):.3f}" for k in STAGES + ("total",))
                fh.write(f"{r.index},{r.timestamp:.6f},{vals}\n")
        summary = self.summary()
        with open(out / "summary.txt", "w", encoding="utf-8") as fh:
            for k, v in summary.items():
                fh.write(f"{k} = {v}\n")
            for e in self.loop_events:
                fh.write(
                    f"loop = scan {e.scan_index} keyframe {e.query_id} -> {e.match_id} "
                    f"sim {e.similarity:.3f} inliers {e.inlier_count} residual {e.mean_residual:.3f} "
                    f"{'accepted' if e.accepted else 'rejected'}\n"
                )
        if plot:
            from .plotting import plot_run

            plot_run(self, out / "trajectory.png")
        return summary


def run_sequence(scans, config=None, mode="serial", vocabulary=None, vocab_seed=0):
    """Convenience driver over an in-memory (re-iterable) scan list."""
    pipe = Pipeline(config, vocabulary)
    pipe.prepare_vocabulary(scans, vocab_seed)
    return pipe.run(scans, mode)

