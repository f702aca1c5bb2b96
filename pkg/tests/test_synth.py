import numpy as np
import pytest

from intensity_slam import synth
from intensity_slam.features import build_frame, segment_test
from intensity_slam.geometry import Se3Pose
from intensity_slam.intensity_image import project


def test_empty_world():
    scan = synth.render_scan(synth.World(), synth.SensorModel(), Se3Pose.identity())
    assert scan.num_valid == 0


def box_world(half=5.0):
    w = synth.World()
    tex = synth.Texture()
    for axis in range(3):
        for sign in (-1.0, 1.0):
            o = np.full(3, -half)
            o[axis] = sign * half
            u = np.zeros(3)
            v = np.zeros(3)
            u[(axis + 1) % 3] = 2 * half
            v[(axis + 2) % 3] = 2 * half
            w.add(o, u, v, tex)
    return w


def test_ray_box_oracle():
    sensor = synth.SensorModel().noiseless()
    res = synth.render(box_world(), sensor, Se3Pose.identity())
    assert res.scan.valid.all()
    d = sensor.directions()
    with np.errstate(divide="ignore"):
        analytic = np.min(5.0 / np.abs(d), axis=-1)
    assert np.abs(res.ranges - analytic).max() < 1e-9


def test_deterministic_per_seed():
    world, poses = synth.scenario("parking", 2, 0.2)
    a = synth.render_scan(world, synth.SensorModel(), poses[1], seed=4)
    b = synth.render_scan(world, synth.SensorModel(), poses[1], seed=4)
    c = synth.render_scan(world, synth.SensorModel(), poses[1], seed=5)
    assert a.same_as(b) and not a.same_as(c)


def test_corridor_is_straight_line():
    _, poses = synth.scenario("corridor", 50, 0.2)
    t = np.array([p.t for p in poses])
    assert np.allclose(t[:, 1:], 0) and abs(t[-1, 0] - t[0, 0] - 9.8) < 1e-12
    assert all(p.rotation_angle() == 0 for p in poses)


def test_loop_returns_to_start():
    _, poses = synth.scenario("loop", 200, 0.4)
    assert np.abs(poses[-1].matrix() - poses[0].matrix()).max() < 1e-12
    steps = [np.linalg.norm(b.t - a.t) for a, b in zip(poses, poses[1:])]
    assert max(steps) < 0.41


@pytest.mark.parametrize("name", synth.SCENARIOS)
def test_scans_mostly_valid(name):
    world, poses = synth.scenario(name, 50, 0.2)
    sensor = synth.SensorModel()
    for pose in poses[::7]:
        scan = synth.render_scan(world, sensor, pose)
        assert scan.num_valid >= 0.3 * scan.rows * scan.cols


def point_in_triangle_distance(p, tri):
    a, b, c = tri
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    off = (p - a) @ n
    q = p - off * n
    # barycentric inside check with a small tolerance
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    inside = v >= -1e-9 and w >= -1e-9 and v + w <= 1 + 1e-9
    return abs(off), inside


@pytest.mark.parametrize("name", ["corridor", "parking", "slope"])
def test_back_projection_lands_on_triangle(name):
    world, poses = synth.scenario(name, 5, 0.5)
    res = synth.render(world, synth.SensorModel().noiseless(), poses[3])
    tris = world.triangles()
    rows, cols = np.nonzero(res.scan.valid)
    pick = np.random.default_rng(0).choice(len(rows), 300, replace=False)
    for r, c in zip(rows[pick], cols[pick]):
        p = poses[3].transform_point(res.points[r, c])
        dist, inside = point_in_triangle_distance(p, tris[res.triangle[r, c]])
        assert dist < 1e-9 and inside


def test_texture_values_in_range():
    world, poses = synth.scenario("loop", 20, 0.4)
    scan = synth.render_scan(world, synth.SensorModel().noiseless(), poses[3])
    vals = scan.intensity[scan.valid]
    assert vals.min() >= 0 and vals.max() <= synth.INTENSITY_MAX
    assert np.all(np.isfinite(world.triangles()))


def test_corridor_has_corners(corridor_pair):
    for scan in corridor_pair[0]:
        img = project(scan)
        corner, _ = segment_test(img.pixels, 20)
        assert corner.sum() >= 100
        assert len(build_frame(scan, cap=10_000).features) >= 100


def test_sequence_files(tmp_path):
    scans, truth = synth.make_sequence("corridor", 3, 0.2)
    synth.write_sequence(tmp_path, scans, truth)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["000000.scan", "000001.scan", "000002.scan",
                                                          "ground_truth.txt"]


def test_scenario_rejects_short_sequences():
    with pytest.raises(ValueError):
        synth.scenario("corridor", 1, 0.2)
