import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intensity_slam.config import Config, load_config, parse_config
from intensity_slam.errors import ConfigError, FormatError, InvalidInput
from intensity_slam.geometry import Se3Pose
from intensity_slam.scan_io import (
    OrganizedScan,
    TrajectoryRecord,
    convert_ascii,
    iter_scans,
    read_scan,
    read_trajectory,
    write_scan,
    write_trajectory,
)

from conftest import random_pose


def random_scan(rng, rows=8, cols=16, ts=1.25):
    xyz = rng.normal(0, 10, (rows, cols, 3)).astype(np.float32)
    inten = rng.uniform(0, 500, (rows, cols)).astype(np.float32)
    valid = rng.random((rows, cols)) < 0.7
    return OrganizedScan(xyz, inten, valid, ts)


def test_all_zero_payload_reads_as_empty(tmp_path):
    p = tmp_path / "z.scan"
    payload = bytes(64 * 1024 * 17)
    p.write_bytes(struct.pack("<4sIIId", b"OSCN", 1, 64, 1024, 0.0) + payload)
    s = read_scan(p)
    assert (s.rows, s.cols) == (64, 1024)
    assert s.num_valid == 0


def test_scan_roundtrip_bit_exact(tmp_path, rng):
    s = random_scan(rng)
    write_scan(s, tmp_path / "a.scan")
    r = read_scan(tmp_path / "a.scan")
    assert r.same_as(s)
    assert r.xyz.tobytes() == s.xyz.tobytes()


def test_invalid_cells_are_zeroed(rng):
    s = random_scan(rng)
    assert not s.xyz[~s.valid].any()
    assert not s.intensity[~s.valid].any()


def test_zero_range_cell_becomes_invalid(tmp_path):
    s = OrganizedScan.empty(2, 3)
    s.valid[0, 0] = True  # flagged valid but at the origin
    write_scan(s, tmp_path / "o.scan")
    assert read_scan(tmp_path / "o.scan").num_valid == 0


def test_truncated_payload(tmp_path, rng):
    p = tmp_path / "t.scan"
    write_scan(random_scan(rng, 64, 1024), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_scan(p)


def test_bad_magic(tmp_path, rng):
    p = tmp_path / "m.scan"
    write_scan(random_scan(rng), p)
    data = bytearray(p.read_bytes())
    data[:4] = b"NOPE"
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        read_scan(p)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_scan(tmp_path / "nope.scan")


def test_non_finite_valid_cell_rejected():
    xyz = np.zeros((1, 2, 3))
    xyz[0, 0] = np.nan
    with pytest.raises(InvalidInput):
        OrganizedScan(xyz, np.zeros((1, 2)), np.array([[True, False]]))


def test_prefetching_reader_keeps_order(tmp_path, rng):
    paths = []
    for k in range(6):
        p = tmp_path / f"{k:06d}.scan"
        write_scan(random_scan(rng, ts=float(k)), p)
        paths.append(p)
    assert [s.timestamp for s in iter_scans(paths)] == [float(k) for k in range(6)]


def test_identity_trajectory_line(tmp_path):
    p = tmp_path / "t.txt"
    write_trajectory([TrajectoryRecord(0.0, Se3Pose.identity())], p)
    assert p.read_text() == "0.000000000 0 0 0 0 0 0 1\n"


def test_empty_trajectory(tmp_path):
    p = tmp_path / "e.txt"
    write_trajectory([], p)
    assert p.read_text() == ""
    assert read_trajectory(p) == []


def test_out_of_order_trajectory(tmp_path):
    recs = [TrajectoryRecord(1.0, Se3Pose.identity()), TrajectoryRecord(0.5, Se3Pose.identity())]
    with pytest.raises(InvalidInput):
        write_trajectory(recs, tmp_path / "x.txt")


def test_trajectory_roundtrip(tmp_path, rng):
    recs = [TrajectoryRecord(0.1 * k + 3.0, random_pose(rng)) for k in range(50)]
    write_trajectory(recs, tmp_path / "r.txt")
    back = read_trajectory(tmp_path / "r.txt")
    for a, b in zip(recs, back):
        assert abs(a.timestamp - b.timestamp) < 1e-8
        assert np.abs(a.pose.t - b.pose.t).max() < 1e-8
        assert np.abs(a.pose.quaternion - b.pose.quaternion).max() < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(-1e3, 1e3, allow_nan=False))
def test_trajectory_fields_roundtrip_within_tolerance(tmp_path_factory, x, y):
    p = tmp_path_factory.mktemp("traj") / "h.txt"
    rec = TrajectoryRecord(12.5, Se3Pose(translation=(x, y, 0.0)))
    write_trajectory([rec], p)
    back = read_trajectory(p)[0]
    assert np.abs(back.pose.t - rec.pose.t).max() <= 1e-8 * max(1.0, abs(x), abs(y))


def test_config_defaults_and_values(tmp_path):
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    assert load_config(empty) == Config()
    c = parse_config("# comment\nfeature_cap = 200\nkf_dist = 2.5  # trailing\nuse_ba = false\n")
    assert c.feature_cap == 200 and c.kf_dist == 2.5 and c.use_ba is False


def test_config_bad_value_names_line():
    with pytest.raises(ConfigError) as e:
        parse_config("kf_dist = 1.0\nfeature_cap = banana\n")
    assert e.value.line == 2 and e.value.key == "feature_cap"


def test_config_unknown_key():
    with pytest.raises(ConfigError) as e:
        parse_config("bogus = 1")
    assert e.value.key == "bogus"


def test_config_invariants():
    with pytest.raises(ConfigError):
        parse_config("kf_dist = -1")
    with pytest.raises(ConfigError):
        parse_config("feature_cap = 5\nmin_matches = 8")


def test_convert_ascii(tmp_path):
    pts = np.array(
        [
            [1.0, 0.0, 0.0, 10.0, 3],  # straight ahead -> centre column
            [-1.0, 0.0, 0.0, 20.0, 3],  # behind -> column 0
            [2.0, 0.0, 0.0, 30.0, 3],  # same cell as the first, farther: dropped
        ]
    )
    src = tmp_path / "c.txt"
    np.savetxt(src, pts)
    s = convert_ascii(src, 8, 16)
    assert s.num_valid == 2
    assert s.valid[3, 8] and s.intensity[3, 8] == 10.0
    assert s.valid[3, 0] and s.intensity[3, 0] == 20.0
