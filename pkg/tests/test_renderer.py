from types import SimpleNamespace

import numpy as np
import pytest

from conftest import random_pose, random_scene
from reference import fd_gradient_check, naive_render
from splatslam.core import CameraModel, PoseSE3, quat_to_rotmat, rotmat_to_quat
from splatslam.renderer import render, render_with_gradients


def _one(mean, scales=(0.1, 0.1, 0.1), opacity=0.8, color=(1.0, 0.5, 0.25)):
    return SimpleNamespace(means=np.array([mean], float), quats=np.array([[1.0, 0, 0, 0]]),
                           log_scales=np.log([scales]), opacity=np.array([opacity]),
                           colors=np.array([color]), sky=np.zeros(1, bool))


def test_single_primitive_center_pixel(cam):
    # rig x = 4 lands on the principal point region; place it exactly on a pixel centre
    m = _one([4.0, -0.5 * 4 / 40, -0.5 * 4 / 40])
    b = render(m, PoseSE3.identity(), cam)
    row, col = 24, 32
    assert b.alpha_accum[row, col] == pytest.approx(0.8)
    assert np.allclose(b.color[row, col], 0.8 * np.array([1.0, 0.5, 0.25]))
    assert b.depth[row, col] == pytest.approx(0.8 * 4.0)
    assert b.transmittance[row, col] == pytest.approx(0.2)


def test_two_stacked_primitives(cam):
    c = [4.0, -0.05, -0.05]
    m = SimpleNamespace(means=np.array([c, [6.0, -0.075, -0.075]]), quats=np.tile([1.0, 0, 0, 0], (2, 1)),
                        log_scales=np.log(np.full((2, 3), 0.5)), opacity=np.array([0.5, 0.5]),
                        colors=np.array([[1.0, 0, 0], [0, 0, 1.0]]), sky=np.zeros(2, bool))
    b = render(m, PoseSE3.identity(), cam)
    assert np.allclose(b.color[24, 32], [0.5, 0, 0.25])
    assert b.alpha_accum[24, 32] == pytest.approx(0.75)


def test_zero_opacity_primitive_is_invisible(cam, rng):
    m = random_scene(rng, 30)
    a = render(m, PoseSE3.identity(), cam)
    for k in ("means", "quats", "log_scales", "colors"):
        setattr(m, k, np.concatenate([getattr(m, k), getattr(m, k)[:1]]))
    m.opacity = np.append(m.opacity, 0.0)
    m.sky = np.append(m.sky, False)
    b = render(m, PoseSE3.identity(), cam)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_rigid_motion_of_world_and_pose(cam, rng):
    m = random_scene(rng, 40)
    pose = random_pose(rng, 0.1, 0.05)
    a = render(m, pose, cam)
    T = random_pose(rng)
    m2 = SimpleNamespace(**{k: np.copy(v) for k, v in m.__dict__.items()})
    m2.means = T.apply(m.means)
    m2.quats = rotmat_to_quat(T.R @ quat_to_rotmat(m.quats))
    b = render(m2, T.compose(pose), cam)
    assert np.allclose(a.color, b.color, atol=1e-9)
    assert np.allclose(a.depth, b.depth, atol=1e-9)


def test_matches_naive_reference(cam, rng):
    for _ in range(3):
        m = random_scene(rng, 25)
        pose = random_pose(rng, 0.1, 0.05)
        b = render(m, pose, cam)
        T = cam.world_to_camera(pose).matrix()
        c, d, a = naive_render(m, T, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        assert np.max(np.abs(b.color - c)) < 1e-6
        assert np.max(np.abs(b.depth - d)) < 1e-6
        assert np.all(b.alpha_accum <= 1.0)


def test_sky_excluded_from_depth(cam, rng):
    m = random_scene(rng, 10)
    m.sky[:] = True
    b = render(m, PoseSE3.identity(), cam)
    assert np.all(b.depth == 0) and b.alpha_accum.max() > 0


def test_gradients_match_finite_differences(rng):
    cam = CameraModel(40.0, 42.0, 23.5, 17.5, 48, 36, PoseSE3.exp(rng.normal(scale=0.05, size=6)))
    m = random_scene(rng, 6)
    flags, pose_flags = fd_gradient_check(m, random_pose(rng, 0.05, 0.05), cam, rng)
    assert flags.mean() >= 0.95
    assert pose_flags.all()


def test_zero_upstream_gives_zero_gradient(cam, rng):
    m = random_scene(rng, 20)
    g = render_with_gradients(m, PoseSE3.identity(), cam, np.zeros((48, 64, 3)))
    for k in ("means", "log_scales", "quats", "opacity", "colors", "pose"):
        assert not np.any(getattr(g, k))


def test_color_gradient_is_blend_weight_sum(cam, rng):
    m = random_scene(rng, 15)
    b = render(m, PoseSE3.identity(), cam)
    g = render_with_gradients(m, PoseSE3.identity(), cam, np.ones((48, 64, 3)), buffer=b)
    # the color image is linear in colors, so dL/dc_i is the total weight of primitive i
    assert np.isclose(g.colors[:, 0].sum(), b.alpha_accum.sum())
    assert np.allclose(g.colors[:, 0], g.colors[:, 2])


def test_nothing_visible(cam):
    m = _one([-4.0, 0, 0])
    b = render(m, PoseSE3.identity(), cam)
    assert not b.color.any() and np.all(b.transmittance == 1)
