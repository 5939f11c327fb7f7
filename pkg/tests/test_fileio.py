import numpy as np
import pytest

from splatslam.core import PoseSE3, default_extrinsic
from splatslam.fileio import (MissingCalibration, UnreadableFile, read_calib, read_pfm, read_ply, read_ppm, read_tum,
                              read_xyz, write_calib, write_pfm, write_ply, write_ppm, write_tum, write_xyz)
from splatslam.gaussian_map import GaussianMap


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_pfm_roundtrip(tmp_path, rng):
    d = rng.uniform(0, 10, (5, 6)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "d.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)


def test_xyz_roundtrip_is_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    write_xyz(tmp_path / "s.xyz", pts)
    assert np.array_equal(read_xyz(tmp_path / "s.xyz"), pts)


def test_malformed_xyz_names_path(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 three\n")
    with pytest.raises(UnreadableFile, match="bad.xyz"):
        read_xyz(p)


def test_tum_roundtrip(tmp_path, rng):
    poses = [PoseSE3(rng.normal(size=4), rng.normal(size=3)) for _ in range(5)]
    stamps = 100.0 + 0.1 * np.arange(5)
    write_tum(tmp_path / "t.txt", stamps, poses)
    s2, p2 = read_tum(tmp_path / "t.txt")
    assert np.allclose(s2, stamps)
    for a, b in zip(poses, p2):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-8)


def test_calib_roundtrip(tmp_path):
    K = np.array([[40.0, 0, 31.5], [0, 41.0, 23.5], [0, 0, 1]])
    T = default_extrinsic([0.1, -0.2, 0.05])
    write_calib(tmp_path / "calib.txt", K, T)
    K2, T2 = read_calib(tmp_path / "calib.txt")
    assert np.array_equal(K2, K)
    assert np.allclose(T2.matrix(), T.matrix())


def test_missing_calibration(tmp_path):
    with pytest.raises(MissingCalibration):
        read_calib(tmp_path / "calib.txt")


def test_ply_roundtrip_float32(tmp_path, rng):
    m = GaussianMap()
    n = 20
    m.add_arrays(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.uniform(-3, 0, (n, 3)),
                 rng.uniform(0.1, 0.9, n), rng.uniform(0, 1, (n, 3)), reliable=rng.random(n) > 0.5,
                 sky=rng.random(n) > 0.8, birth_frame=rng.integers(0, 9, n), normal_hint=rng.normal(size=(n, 3)))
    m.save_ply(tmp_path / "m.ply")
    d = read_ply(tmp_path / "m.ply")
    assert np.allclose(d["means"], m.means, atol=1e-6)
    assert np.allclose(d["colors"], m.colors, atol=1e-6)
    assert np.allclose(d["opacity"], m.opacity, atol=1e-6)
    assert np.allclose(d["quats"], m.quats, atol=1e-6)
    assert np.array_equal(d["reliable"], m.reliable)
    assert np.array_equal(d["sky"], m.sky)
    assert np.array_equal(d["birth_frame"], m.birth_frame)
    header = (tmp_path / "m.ply").read_bytes().split(b"end_header")[0].decode()
    for name in ("f_dc_0", "scale_0", "rot_0", "opacity"):
        assert f"property float {name}" in header


def test_not_a_ply(tmp_path):
    p = tmp_path / "x.ply"
    p.write_text("hello")
    with pytest.raises(UnreadableFile):
        read_ply(p)
