import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatslam.core import (CameraModel, GaussianPrimitive, PoseSE3, covariance_of, default_extrinsic,
                            gaussian_eval, quat_to_rotmat, rotmat_to_quat, so3_exp)

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(vec3, vec3)
def test_exp_log_roundtrip(v, w):
    w = np.array(w)
    if np.linalg.norm(w) > 3.0:
        w = w / np.linalg.norm(w) * 3.0
    xi = np.concatenate([v, w])
    assert np.allclose(PoseSE3.exp(xi).log(), xi, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, vec3)
def test_inverse_and_compose(v, w, p):
    T = PoseSE3.exp(np.concatenate([v, np.array(w) / 3]))
    assert np.allclose(T.inverse().apply(T.apply(p)), p, atol=1e-9)
    assert np.allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-9)
    assert np.allclose((T @ T).matrix(), T.matrix() @ T.matrix(), atol=1e-9)


def test_quaternion_matrix_roundtrip(rng):
    q = rng.normal(size=(200, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    R = quat_to_rotmat(q)
    assert np.allclose(R @ np.swapaxes(R, 1, 2), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)
    assert np.allclose(rotmat_to_quat(R), q, atol=1e-12)


def test_so3_exp_matches_rotation_about_z():
    R = so3_exp([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0])


def test_covariance_symmetric_positive():
    g = GaussianPrimitive(mean=[1, 2, 3], rotation=[0.9, 0.1, -0.3, 0.2], log_scales=[-1, -2, 0.5])
    S = covariance_of(g)
    assert np.array_equal(S, S.T)
    assert np.all(np.linalg.eigvalsh(S) > 0)
    assert np.allclose(np.sort(np.linalg.eigvalsh(S)), np.sort(np.exp(2 * g.log_scales)))


def test_gaussian_eval_peak_and_decay():
    g = GaussianPrimitive(mean=[0, 0, 0], log_scales=np.log([1.0, 2.0, 0.5]))
    assert gaussian_eval(g, [0, 0, 0]) == 1.0
    assert np.isclose(gaussian_eval(g, [0, 2.0, 0]), np.exp(-0.5))


def test_scale_floor():
    g = GaussianPrimitive(mean=[0, 0, 0], log_scales=[-50, 0, 0])
    assert g.scales[0] == pytest.approx(1e-4)


def test_primitive_normal_is_smallest_axis_oriented_by_hint():
    g = GaussianPrimitive(mean=[0, 0, 0], log_scales=np.log([1.0, 1.0, 0.1]), normal_hint=[0, 0, -1])
    assert np.allclose(g.normal(), [0, 0, -1])


def test_camera_projection_and_backprojection():
    cam = CameraModel(50.0, 60.0, 20.0, 15.0, 40, 30, default_extrinsic())
    p = np.array([[0.3, -0.2, 4.0]])
    u, v, z = cam.project(p)
    assert np.allclose(cam.backproject(u, v, z), p)
    # rig x-forward maps onto camera z
    wc = cam.world_to_camera(PoseSE3.identity())
    assert np.allclose(wc.apply([2.0, 0.0, 0.0]), [0.0, 0.0, 2.0])
