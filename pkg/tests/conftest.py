import os
from types import SimpleNamespace

import numpy as np
import pytest

from splatslam.core import CameraModel, PoseSE3, default_extrinsic, rotvec_to_quat


def random_pose(rng, t_scale=1.0, r_scale=0.5):
    return PoseSE3(rotvec_to_quat(rng.normal(0, r_scale, 3)), rng.normal(0, t_scale, 3))


def random_scene(rng, n, depth=(2.0, 6.0), spread=1.5, scale=(-2.5, -1.0), opacity=(0.2, 0.95)):
    """Gaussians in front of a camera looking down +x of the rig frame."""
    means = np.column_stack([rng.uniform(*depth, n), rng.uniform(-spread, spread, n),
                             rng.uniform(-spread, spread, n) * 0.75])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return SimpleNamespace(
        means=means, quats=quats, log_scales=rng.uniform(*scale, (n, 3)),
        opacity=rng.uniform(*opacity, n), colors=rng.uniform(0, 1, (n, 3)), sky=np.zeros(n, dtype=bool))


@pytest.fixture
def cam():
    return CameraModel(40.0, 40.0, 31.5, 23.5, 64, 48, default_extrinsic())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corridor_small(tmp_path_factory):
    """12-frame noiseless corridor dataset shared by slow tests."""
    from splatslam.simulator import bundled_scene, generate_from_spec, load_spec
    spec = load_spec(bundled_scene("plane-corridor"))
    spec.trajectory.frames = 12
    spec.trajectory.end = np.array([1.2, 0.0, 1.2])
    out = tmp_path_factory.mktemp("corridor_small")
    generate_from_spec(spec, out)
    return out
