import csv

import numpy as np
import pytest

from splatslam import gaussian_map as gm
from splatslam.backend import (Backend, BackendParams, KeyframeRecord, LossBreakdown, compute_loss, optimize_map,
                               optimize_poses)
from splatslam.core import CameraModel, PoseSE3, default_extrinsic
from splatslam.fileio import read_tum
from splatslam.renderer import render
from splatslam.sensor import Frame, SequenceReader


@pytest.fixture(scope="module")
def corridor(corridor_small):
    reader = SequenceReader(corridor_small)
    frames = list(reader)
    _, gt = read_tum(corridor_small / "gt_trajectory.txt")
    return reader.camera, frames, gt


def _mapped(corridor, ids=(0, 6)):
    cam, frames, gt = corridor
    m = gm.GaussianMap()
    kfs = []
    for k, i in enumerate(ids):
        gm.insert_keyframe_points(m, frames[i], gt[i], cam)
        kfs.append(KeyframeRecord(frames[i], gt[i], k))
    return m, kfs, cam


def test_combine_weights():
    l = LossBreakdown.combine(0.2, 0.4, 0.1, 0.25, 0.5)
    assert l.total == pytest.approx(0.75 * 0.2 + 0.25 * 0.4 + 0.5 * 0.1)


def test_pure_geometric_loss_ignores_image(corridor):
    m, kfs, cam = _mapped(corridor, (0,))
    a = compute_loss(m, kfs[0], cam, lambda1=1.0, lambda2=0.0)
    kfs[0].frame.image = kfs[0].frame.image.copy()
    kfs[0].frame.image[:] = 0.0
    b = compute_loss(m, kfs[0], cam, lambda1=1.0, lambda2=0.0)
    assert a.total == b.total == a.E_geo
    assert b.E_pho != a.E_pho


def test_color_gradient_matches_finite_differences(corridor):
    m, kfs, cam = _mapped(corridor, (0,))
    _, g = compute_loss(m, kfs[0], cam, 0.5, 0.01, with_grad=True)
    vis = np.flatnonzero(np.abs(g.colors[:, 0]) > 1e-7)[:5]
    h = 1e-7
    for i in vis:
        old = m.colors[i, 0]
        m.colors[i, 0] = old + h
        lp = compute_loss(m, kfs[0], cam).total
        m.colors[i, 0] = old - h
        lm = compute_loss(m, kfs[0], cam).total
        m.colors[i, 0] = old
        assert g.colors[i, 0] == pytest.approx((lp - lm) / (2 * h), rel=1e-3, abs=1e-9)


def test_zero_iterations_leave_state_unchanged(corridor):
    m, kfs, cam = _mapped(corridor)
    before = {k: getattr(m, k).copy() for k in ("means", "quats", "log_scales", "opacity", "colors")}
    poses = [kf.pose for kf in kfs]
    assert optimize_poses(m, kfs, cam, iters=0) == []
    assert optimize_map(m, kfs, cam, iters=0) == []
    for k, v in before.items():
        assert np.array_equal(getattr(m, k), v)
    assert all(kf.pose is p for kf, p in zip(kfs, poses))


def test_gauge_keyframe_is_fixed(corridor):
    m, kfs, cam = _mapped(corridor)
    kfs[1].pose = kfs[1].pose.compose(PoseSE3.exp([0.03, 0, 0, 0, 0, 0]))
    first = kfs[0].pose
    optimize_poses(m, kfs, cam, iters=5, fixed=[kfs[0]])
    assert kfs[0].pose is first


def _exact_scene():
    """A Gaussian-only world whose keyframes are its own renders: a converged map."""
    rng = np.random.default_rng(3)
    n = 500
    m = gm.GaussianMap()
    means = np.column_stack([rng.uniform(2, 6, n), rng.uniform(-3, 3, n), rng.uniform(-2.2, 2.2, n)])
    m.add_arrays(means, rng.normal(size=(n, 4)), rng.uniform(np.log(0.08), np.log(0.3), (n, 3)),
                 rng.uniform(0.5, 0.95, n), rng.uniform(0, 1, (n, 3)))
    cam = CameraModel(40.0, 40.0, 31.5, 23.5, 64, 48, default_extrinsic())

    def keyframe(pose, i):
        b = render(m, pose, cam)
        return KeyframeRecord(Frame(i, float(i), b.color, None, np.where(b.alpha_accum > 0.5, b.depth, 0.0)), pose, i)

    truth = PoseSE3.exp([0.1, 0.05, 0, 0, 0, 0.02])
    return m, cam, keyframe(PoseSE3.identity(), 0), keyframe(truth, 1), truth


def test_perturbed_pose_recovered():
    m, cam, k0, k1, truth = _exact_scene()
    k1.pose = truth.compose(PoseSE3.exp([0.06, -0.06, 0.05, 0, 0, 0]))
    assert np.linalg.norm(k1.pose.translation - truth.translation) == pytest.approx(0.1, abs=2e-3)
    hist = optimize_poses(m, [k0, k1], cam, iters=50, fixed=[k0])
    assert np.all(np.diff(hist) <= 0)
    assert np.linalg.norm(k1.pose.translation - truth.translation) < 0.02


def test_correct_pose_is_stationary():
    m, cam, k0, k1, truth = _exact_scene()
    optimize_poses(m, [k0, k1], cam, iters=10, fixed=[k0])
    assert np.linalg.norm(k1.pose.log() - truth.log()) < 1e-4


def test_map_round_lowers_loss(corridor):
    m, kfs, cam = _mapped(corridor)
    hist = optimize_map(m, kfs, cam, iters=15, params=BackendParams(freeze_anchored=False))
    assert hist[-1] < hist[0]


def test_anchored_geometry_is_held(corridor):
    m, kfs, cam = _mapped(corridor)
    means = m.means.copy()
    colors = m.colors.copy()
    optimize_map(m, kfs, cam, iters=3)
    assert np.array_equal(m.means, means)
    assert not np.array_equal(m.colors, colors)


def test_five_keyframes_form_one_batch_and_log(corridor, tmp_path):
    cam, frames, gt = corridor
    b = Backend(gm.GaussianMap(), cam, BackendParams(pose_iters=2, map_iters=2))
    for i in range(5):
        b.enqueue(frames[2 * i], gt[2 * i])
    info = b.backend_step()
    assert info["batch"] == 0 and info["keyframes"] == 5
    assert b.backend_step()["batch"] is None
    b.write_log(tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["batch", "round", "iter", "E_pho", "E_geo", "E_normal", "total"]
    assert {r[1] for r in rows[1:]} == {"1", "2"}
