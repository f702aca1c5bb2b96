import numpy as np
import pytest
from scipy.optimize import least_squares

from intensity_slam.config import Config
from intensity_slam.errors import DisconnectedGraph, NotPositiveDefinite
from intensity_slam.geometry import Se3Pose
from intensity_slam.loop_closure import LoopCandidate
from intensity_slam.pose_graph import (
    LOOP,
    GraphEdge,
    PoseGraph,
    edge_jacobians,
    edge_residual,
    graph_cost,
    maybe_keyframe,
    optimize_graph,
)

from conftest import random_pose


def dense_oracle(vertices, edges, fixed):
    """Generic nonlinear least squares over left increments of the free vertices."""
    free = [v for v in sorted(vertices) if v not in fixed]
    roots = {e: np.linalg.cholesky(x.information).T for e, x in enumerate(edges)}

    def poses_of(x):
        out = dict(vertices)
        for k, v in enumerate(free):
            out[v] = Se3Pose.exp(x[6 * k : 6 * k + 6]) @ vertices[v]
        return out

    def residuals(x):
        p = poses_of(x)
        return np.concatenate([roots[k] @ edge_residual(p[e.source], p[e.target], e.relative)
                               for k, e in enumerate(edges)])

    sol = least_squares(residuals, np.zeros(6 * len(free)), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=20000)
    return poses_of(sol.x), 2.0 * sol.cost


def noisy_loop_graph(rng, n, noise=0.02):
    truth = [Se3Pose.identity()]
    for _ in range(n - 1):
        truth.append(truth[-1] @ Se3Pose.exp(np.r_[rng.normal(0, 0.2, 3), rng.normal(0, 1.0, 3)]))
    edges = []
    for i in range(n - 1):
        z = truth[i].inverse() @ truth[i + 1]
        edges.append(GraphEdge(i, i + 1, Se3Pose.exp(rng.normal(0, noise, 6)) @ z))
    z = truth[0].inverse() @ truth[-1]
    edges.append(GraphEdge(0, n - 1, Se3Pose.exp(rng.normal(0, noise, 6)) @ z, 0.5 * np.eye(6), LOOP))
    init = {0: truth[0]}
    for e in edges[:-1]:
        init[e.target] = init[e.source] @ e.relative
    return init, edges


def test_chain_consistent():
    rng = np.random.default_rng(1)
    poses = {0: Se3Pose.identity(), 1: random_pose(rng), 2: random_pose(rng)}
    edges = [GraphEdge(0, 1, poses[0].inverse() @ poses[1]), GraphEdge(1, 2, poses[1].inverse() @ poses[2])]
    for e in edges:
        assert np.abs(edge_residual(poses[e.source], poses[e.target], e.relative)).max() < 1e-12
    out = optimize_graph(poses, edges)
    for v in poses:
        assert np.abs(out[v].matrix() - poses[v].matrix()).max() < 1e-12
    assert graph_cost(out, edges) < 1e-20


def test_edge_jacobians_finite_differences(rng):
    for _ in range(50):
        xi, xj, z = random_pose(rng), random_pose(rng), random_pose(rng, max_angle=0.5)
        r, Ji, Jj = edge_jacobians(xi, xj, z)
        h = 1e-6
        for J, which in ((Ji, 0), (Jj, 1)):
            fd = np.zeros((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                a = [xi, xj]
                b = [xi, xj]
                a[which] = a[which].retract(d)
                b[which] = b[which].retract(-d)
                fd[:, k] = (edge_residual(*a, z) - edge_residual(*b, z)) / (2 * h)
            assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-5


def test_square_loop_translation_drift():
    corners = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 0)]
    truth = [Se3Pose(translation=c) for c in corners]
    edges = [GraphEdge(i, i + 1, Se3Pose(translation=np.subtract(corners[i + 1], corners[i]))) for i in range(4)]
    edges[-1] = GraphEdge(3, 4, Se3Pose(translation=(0.0, -1.0 + 0.01, 0)))
    edges.append(GraphEdge(0, 4, Se3Pose.identity(), np.eye(6), LOOP))
    init = {0: truth[0]}
    for e in edges[:4]:
        init[e.target] = init[e.source] @ e.relative
    assert abs(init[4].t[1] - 0.01) < 1e-15
    out = optimize_graph(init, edges)
    # the 1 cm gap is shared by every edge instead of sitting on the loop edge
    loop_r = np.linalg.norm(edge_residual(out[0], out[4], edges[-1].relative))
    odo_r = [np.linalg.norm(edge_residual(out[e.source], out[e.target], e.relative)) for e in edges[:4]]
    assert 1e-4 < loop_r < 0.005
    assert min(odo_r) > 1e-4
    assert graph_cost(out, edges) < 0.01**2
    _, oracle = dense_oracle(init, edges, {0})
    assert abs(graph_cost(out, edges) - oracle) < 1e-9


@pytest.mark.parametrize("n", [3, 5, 8, 10])
def test_matches_dense_oracle(n):
    rng = np.random.default_rng(100 + n)
    init, edges = noisy_loop_graph(rng, n)
    stats = {}
    out = optimize_graph(init, edges, stats=stats)
    _, oracle = dense_oracle(init, edges, {0})
    assert abs(graph_cost(out, edges) - oracle) < 1e-9
    h = stats["history"]
    assert all(b <= a for a, b in zip(h, h[1:])) and stats["final_cost"] <= stats["initial_cost"]


def test_gauge_freedom():
    rng = np.random.default_rng(7)
    init, edges = noisy_loop_graph(rng, 8, noise=0.05)
    G = random_pose(rng)
    moved = {v: G @ p for v, p in init.items()}
    # solved well past the default stopping gradient so the comparison sees the minimiser
    a = optimize_graph(init, edges, grad_tol=1e-13)
    b = optimize_graph(moved, edges, grad_tol=1e-13)
    for v in a:
        assert np.abs((G @ a[v]).matrix() - b[v].matrix()).max() < 1e-8


def test_disconnected():
    p = {0: Se3Pose.identity(), 1: Se3Pose.identity(), 2: Se3Pose.identity(), 3: Se3Pose.identity()}
    with pytest.raises(DisconnectedGraph):
        optimize_graph(p, [GraphEdge(0, 1, Se3Pose.identity()), GraphEdge(2, 3, Se3Pose.identity())])


def test_information_checks():
    bad = np.eye(6)
    bad[0, 1] = 1e-3
    with pytest.raises(NotPositiveDefinite):
        GraphEdge(0, 1, Se3Pose.identity(), bad)
    with pytest.raises(NotPositiveDefinite):
        GraphEdge(0, 1, Se3Pose.identity(), -np.eye(6))


def test_keyframe_rules():
    cfg = Config()
    last = Se3Pose.identity()
    assert maybe_keyframe(Se3Pose(translation=(1.5, 0, 0)), last, 180, cfg)
    small = Se3Pose.exp(np.array([0, 0, 0.05, 0.1, 0, 0]))
    assert not maybe_keyframe(small, last, 180, cfg)
    assert maybe_keyframe(Se3Pose.identity(), last, 30, cfg)
    assert maybe_keyframe(small, None, 180, cfg)


def chain_graph(rng, n=6):
    g = PoseGraph()
    pose = Se3Pose.identity()
    for _ in range(n):
        g.add_keyframe(pose)
        pose = pose @ Se3Pose.exp(np.r_[rng.normal(0, 0.1, 3), rng.normal(0, 1, 3)])
    return g


def test_redundant_loop_leaves_poses(rng):
    g = chain_graph(rng)
    before = {k: p.matrix() for k, p in g.poses().items()}
    rel = g.keyframes[0].pose.inverse() @ g.keyframes[-1].pose
    corr = g.on_loop(LoopCandidate(5, 0, 1.0, rel, 100, 0.0, True))
    assert len(g.edges) == 6
    for k, p in g.poses().items():
        assert np.abs(p.matrix() - before[k]).max() < 1e-9
    assert np.abs(corr.matrix() - np.eye(4)).max() < 1e-9


def test_rejected_candidate_untouched(rng):
    g = chain_graph(rng)
    n_edges = len(g.edges)
    corr = g.on_loop(LoopCandidate(5, 0, 0.9, Se3Pose(translation=(3, 0, 0)), 3, 1.0, False))
    assert len(g.edges) == n_edges and not g.loops
    assert np.array_equal(corr.matrix(), np.eye(4))


def test_correction_maps_old_latest_to_new(rng):
    g = chain_graph(rng)
    old_latest = g.keyframes[-1].pose
    corr = g.on_loop(LoopCandidate(5, 0, 1.0, Se3Pose(translation=(0.3, 0.1, 0)), 100, 0.0, True))
    assert np.abs((corr @ old_latest).matrix() - g.keyframes[-1].pose.matrix()).max() < 1e-12
    assert [k.id for k in g.keyframes] == list(range(6))


def test_dump_format(tmp_path, rng):
    g = chain_graph(rng, 3)
    g.dump(tmp_path / "g.txt")
    lines = (tmp_path / "g.txt").read_text().splitlines()
    assert [l.split()[0] for l in lines] == ["VERTEX_SE3:QUAT"] * 3 + ["EDGE_SE3:QUAT"] * 2
    assert len(lines[0].split()) == 9 and len(lines[-1].split()) == 3 + 7 + 21
