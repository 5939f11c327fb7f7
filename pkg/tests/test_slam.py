import numpy as np

from splatslam.config import RunConfig
from splatslam.fileio import read_tum
from splatslam.metrics import evaluate_trajectory
from splatslam.slam import SlamRun


def test_threaded_run_tracks_the_small_corridor(corridor_small):
    run = SlamRun(corridor_small, RunConfig(threads=2)).run()
    stamps, poses = run.trajectory()
    gs, gp = read_tum(corridor_small / "gt_trajectory.txt")
    assert run.status == "ok" and len(poses) == 12
    assert evaluate_trajectory(stamps, poses, gs, gp).ate_rmse < 0.02
    assert run.backend.keyframes[0].frame.index == 0


def test_first_keyframe_is_the_origin(corridor_small):
    run = SlamRun(corridor_small, RunConfig(threads=1)).run()
    stamps, poses = run.trajectory()
    assert np.allclose(poses[0].matrix(), np.eye(4))
    assert len(run.map) > 0 and run.map.sky.sum() == run.cfg.skybox_count
