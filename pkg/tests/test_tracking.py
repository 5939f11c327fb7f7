import numpy as np
import pytest

from conftest import random_pose
from reference import point_to_plane_cost
from splatslam import gaussian_map as gm
from splatslam.core import PoseSE3, quat_to_rotmat, rotmat_to_quat
from splatslam.sensor import Frame, PointCloud
from splatslam.tracking import (Correspondences, NoCorrespondences, TrackingLost, TrackingParams, TrackingTarget,
                                associate, covisibility, track_frame, tracking_cost, tracking_gradient)


def _corr(rng, n=40, weights=None):
    pts = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    tn = rng.normal(size=(n, 3))
    tn /= np.linalg.norm(tn, axis=1, keepdims=True)
    w = np.ones(n) if weights is None else weights
    return Correspondences(np.arange(n), np.arange(n), pts, nrm, rng.normal(size=(n, 3)), tn, w, np.zeros(n))


def test_cost_zero_at_perfect_alignment():
    n = np.array([[0.0, 0, 1]] * 3)
    c = Correspondences(np.arange(3), np.arange(3), np.eye(3), n, np.eye(3), n, np.ones(3), np.zeros(3))
    assert tracking_cost(c, PoseSE3.identity()) == 0.0


def test_cost_hand_example():
    # one point 0.3 above a plane, normals agree: W r^2 = 0.09
    c = Correspondences(np.arange(1), np.arange(1), np.array([[0.0, 0, 0.3]]), np.array([[0.0, 0, 1]]),
                        np.zeros((1, 3)), np.array([[0.0, 0, 1]]), np.ones(1), np.zeros(1))
    assert tracking_cost(c, PoseSE3.identity(), 0.1) == pytest.approx(0.09)


def test_cost_reduces_to_point_to_plane(rng):
    for _ in range(20):
        c = _corr(rng)
        T = random_pose(rng)
        ref = point_to_plane_cost(c.points, c.point_normals, c.targets, T.R, T.translation)
        assert abs(tracking_cost(c, T, 0.0) - ref) < 1e-10


def test_gradient_matches_finite_differences(rng):
    c = _corr(rng, weights=rng.uniform(0.2, 1.0, 40))
    T = random_pose(rng)
    g = tracking_gradient(c, T, 0.0)
    h = 1e-6
    fd = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        fd[i] = (tracking_cost(c, T.compose(PoseSE3.exp(e)), 0.0) - tracking_cost(c, T.compose(PoseSE3.exp(-e)), 0.0)) / (2 * h)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-6)


def _plane_map(rng, n=800):
    """Three orthogonal walls so all six pose directions are observable."""
    m = gm.GaussianMap()
    walls = [(np.array([1.0, 0, 0]), 0), (np.array([0, 1.0, 0]), 1), (np.array([0, 0, 1.0]), 2)]
    for normal, axis in walls:
        p = rng.uniform(0.2, 3, (n, 3))
        p[:, axis] = 0.0
        R = np.eye(3)
        others = [a for a in range(3) if a != axis]
        R = np.column_stack([normal, np.eye(3)[others[0]], np.eye(3)[others[1]]])
        if np.linalg.det(R) < 0:
            R[:, 2] *= -1
        q = rotmat_to_quat(R)
        m.add_arrays(p, np.tile(q, (n, 1)), np.tile(np.log([0.005, 0.05, 0.05]), (n, 1)), 0.9, [0.5] * 3,
                     normal_hint=normal)
    m.events = [0]
    return m


def test_association_lowest_index_on_ties():
    m = gm.GaussianMap()
    m.add_arrays([[1.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]], [[1.0, 0, 0, 0]] * 3, [[-3.0] * 3] * 3, 0.5, [0.5] * 3)
    m.events = [0]
    t = TrackingTarget(m, use_weights=False)
    c = associate(PointCloud([[1.2, 0, 0]], [[1.0, 0, 0]]), t)
    assert list(c.prim_idx) == [0]


def test_association_matches_brute_force(rng):
    m = gm.GaussianMap()
    m.add_arrays(rng.uniform(-1, 1, (200, 3)), rng.normal(size=(200, 4)), rng.uniform(-3, -1, (200, 3)), 0.5, [0.5] * 3)
    m.events = [0]
    t = TrackingTarget(m, use_weights=False)
    q = rng.uniform(-1.2, 1.2, (100, 3))
    c = associate(PointCloud(q, np.tile([0, 0, 1.0], (100, 1))), t, max_dist=0.2)
    d = np.linalg.norm(q[:, None] - m.means[None], axis=2)
    want = {i: int(np.argmin(d[i])) for i in range(100) if d[i].min() <= 0.2}
    assert dict(zip(c.point_idx.tolist(), c.prim_idx.tolist())) == want


def test_no_correspondences():
    m = gm.GaussianMap()
    m.add_arrays([[0.0, 0, 0]], [[1.0, 0, 0, 0]], [[-3.0] * 3], 0.5, [0.5] * 3)
    m.events = [0]
    with pytest.raises(NoCorrespondences):
        associate(PointCloud([[50.0, 0, 0]], [[1.0, 0, 0]]), TrackingTarget(m), 1.0)


def test_tracking_recovers_perturbation(rng):
    m = _plane_map(rng)
    truth = PoseSE3.exp([0.05, -0.03, 0.02, 0.02, -0.01, 0.015])
    idx = rng.choice(len(m), 1500, replace=False)
    pts_w, nrm_w = m.means[idx], m.normals()[idx]
    inv = truth.inverse()
    cloud = PointCloud(inv.apply(pts_w), inv.rotate(nrm_w))
    frame = Frame(1, 0.1, None, cloud, None)
    res = track_frame(frame, m, PoseSE3.identity(), TrackingParams(robust=False))
    assert res.converged
    assert np.linalg.norm(res.pose.translation - truth.translation) < 1e-6
    assert res.pose.angle_to(truth) < 1e-6


def test_tracking_lost_on_single_plane(rng):
    m = gm.GaussianMap()
    p = np.column_stack([rng.uniform(-1, 1, (300, 2)), np.zeros(300)])
    m.add_arrays(p, [[1.0, 0, 0, 0]] * 300, [np.log([0.05, 0.05, 0.005])] * 300, 0.9, [0.5] * 3)
    m.events = [0]
    frame = Frame(1, 0.1, None, PointCloud(p, np.tile([0, 0, 1.0], (300, 1))), None)
    with pytest.raises(TrackingLost):
        track_frame(frame, m, PoseSE3.identity(), TrackingParams(lambda_r=0.0))


def test_too_few_points(rng):
    m = _plane_map(rng, 50)
    frame = Frame(1, 0.1, None, PointCloud(m.means[:10], m.normals()[:10]), None)
    with pytest.raises(TrackingLost):
        track_frame(frame, m, PoseSE3.identity())


def test_covisibility_symmetric_and_bounded(rng, cam):
    m = gm.GaussianMap()
    m.add_arrays(np.column_stack([rng.uniform(2, 6, 300), rng.uniform(-2, 2, (300, 2))]), [[1.0, 0, 0, 0]] * 300,
                 [[-3.0] * 3] * 300, 0.5, [0.5] * 3)
    m.events = [0]
    a, b = PoseSE3.identity(), PoseSE3.exp([0.3, 0, 0, 0, 0, 0.3])
    c_ab, c_ba = covisibility(m, a, b, cam), covisibility(m, b, a, cam)
    assert c_ab == c_ba and 0 < c_ab < 1
    assert covisibility(m, a, a, cam) == 1.0
    assert covisibility(gm.GaussianMap(), a, b, cam) == 1.0
