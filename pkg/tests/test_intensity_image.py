import numpy as np
import pytest

from intensity_slam.errors import InvalidInput, InvalidParam, NoReturn
from intensity_slam.intensity_image import NormalizationParams, lookup_point, project, read_pgm, write_pgm
from intensity_slam.scan_io import OrganizedScan


def scan_with(intensities, valid=None):
    inten = np.asarray(intensities, dtype=float).reshape(1, -1)
    n = inten.shape[1]
    xyz = np.zeros((1, n, 3))
    xyz[0, :, 0] = np.arange(1, n + 1)
    v = np.ones((1, n), bool) if valid is None else np.asarray(valid).reshape(1, n)
    return OrganizedScan(xyz, inten, v)


def test_all_invalid():
    img = project(OrganizedScan.empty(4, 8))
    assert not img.pixels.any()
    assert (img.index_map == -1).all()


def test_linear_scaling_round_half_up():
    img = project(scan_with([0, 50, 100]), NormalizationParams(cap=100))
    assert img.pixels.tolist() == [[0, 128, 255]]


def test_clamp():
    assert project(scan_with([250]), NormalizationParams(cap=100)).pixels[0, 0] == 255


def test_invalid_cap():
    with pytest.raises(InvalidParam):
        project(scan_with([1]), NormalizationParams(cap=0))


def test_lookup_point():
    s = scan_with([10, 20], valid=[True, False])
    s.xyz[0, 0] = (1, 2, 3)
    img = project(s)
    assert lookup_point(img, s, (0, 0)).tolist() == [1, 2, 3]
    with pytest.raises(NoReturn):
        lookup_point(img, s, (0, 1))
    with pytest.raises(InvalidInput):
        lookup_point(img, s, (1, 0))


def test_lookup_every_valid_cell_and_pixel_zero_where_invalid(rng):
    xyz = rng.normal(0, 5, (6, 10, 3))
    valid = rng.random((6, 10)) < 0.6
    s = OrganizedScan(xyz, rng.uniform(1, 600, (6, 10)), valid)
    img = project(s)
    assert not img.pixels[~valid].any()
    for r, c in zip(*np.nonzero(valid)):
        assert np.array_equal(lookup_point(img, s, (r, c)), s.xyz[r, c].astype(np.float64))
        assert divmod(int(img.index_map[r, c]), s.cols) == (r, c)


def test_project_deterministic(rng):
    s = OrganizedScan(rng.normal(0, 5, (6, 10, 3)), rng.uniform(0, 600, (6, 10)), np.ones((6, 10), bool))
    assert np.array_equal(project(s).pixels, project(s).pixels)


def test_row_gain_equalization_removes_stripes():
    inten = np.tile(np.linspace(50, 150, 32), (4, 1)) * np.array([[1.0], [2.0], [0.5], [1.0]])
    s = OrganizedScan(np.ones((4, 32, 3)), inten, np.ones((4, 32), bool))
    flat = project(s, NormalizationParams(512, True)).pixels.astype(int)
    assert np.abs(flat - flat[0]).max() <= 1


def test_pgm_roundtrip(tmp_path, rng):
    s = OrganizedScan(rng.normal(0, 5, (64, 1024, 3)), rng.uniform(0, 600, (64, 1024)), np.ones((64, 1024), bool))
    img = project(s)
    write_pgm(img, tmp_path / "i.pgm")
    assert (tmp_path / "i.pgm").read_bytes().startswith(b"P5\n1024 64\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "i.pgm"), img.pixels)
