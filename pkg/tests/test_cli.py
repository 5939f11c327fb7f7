import dataclasses
import json
import re

import numpy as np
import pytest

from splatslam.cli import main
from splatslam.config import ConfigError, RunConfig
from splatslam.core import PoseSE3
from splatslam.fileio import format_timestamp, read_pfm, read_ppm, read_tum, write_ppm, write_tum
from splatslam.gaussian_map import GaussianMap
from splatslam.metrics import psnr
from splatslam.renderer import render
from splatslam.sensor import read_camera

TINY_SPEC = """{
  "seed": 3,
  "surfaces": [
    {"type": "plane", "center": [0, 0, -1], "normal": [0, 0, 1], "size": [20, 20], "checker": 1.0},
    {"type": "box", "center": [5, 0, 0], "size": [1, 2, 2], "color": [0.8, 0.3, 0.2]}
  ],
  "trajectory": {"frames": 3, "end": [0.5, 0, 0]},
  "camera": {"width": 16, "height": 12, "fx": 10},
  "lidar": {"points": 300, "noise": 0.01}
}"""


@pytest.fixture(scope="module")
def slam_out(corridor_small, tmp_path_factory):
    out = tmp_path_factory.mktemp("slam_out")
    assert main(["slam", str(corridor_small), "--threads", "1", "--seed", "7", "--out", str(out)]) == 0
    return out


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_simulate_is_deterministic(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(TINY_SPEC)
    for name in ("a", "b"):
        assert main(["simulate", str(spec), "--out", str(tmp_path / name)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert len(a) == 3 + 3 + 2 and a == b


def test_simulate_missing_spec(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "nope.json")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_simulate_bad_field(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(TINY_SPEC.replace('"frames": 3', '"frames": 1'))
    assert main(["simulate", str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "frames" in capsys.readouterr().err


def test_bundled_corridor_runs(corridor_small, slam_out):
    stamps, poses = read_tum(slam_out / "trajectory.txt")
    assert len(poses) == 12
    summary = json.loads((slam_out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["fps"] > 0
    for name in ("map.ply", "loss.csv", "config.txt"):
        assert (slam_out / name).exists()


def test_rerendered_keyframes_match_logged_psnr(corridor_small, slam_out, tmp_path):
    summary = json.loads((slam_out / "summary.json").read_text())
    logged = {format_timestamp(r["timestamp"]): r["psnr"] for r in summary["training_psnr"]}
    stamps, poses = read_tum(slam_out / "trajectory.txt")
    keep = [(t, p) for t, p in zip(stamps, poses) if format_timestamp(t) in logged]
    write_tum(tmp_path / "kf.txt", [t for t, _ in keep], [p for _, p in keep])
    out = tmp_path / "r"
    assert main(["render", str(slam_out / "map.ply"), str(tmp_path / "kf.txt"), "--dataset", str(corridor_small),
                 "--out", str(out)]) == 0
    for name, value in logged.items():
        img = read_ppm(out / f"{name}.ppm")
        assert psnr(img, read_ppm(corridor_small / "images" / f"{name}.ppm")) >= value - 0.1


def test_render_single_splat(tmp_path, corridor_small):
    m = GaussianMap()
    m.add_arrays([[3.0, 0, 0]], [[1.0, 0, 0, 0]], [[-2.0] * 3], 0.9, [1.0, 0, 0])
    m.save_ply(tmp_path / "one.ply")
    write_tum(tmp_path / "p.txt", [0.5], [PoseSE3.identity()])
    assert main(["render", str(tmp_path / "one.ply"), str(tmp_path / "p.txt"), "--dataset", str(corridor_small),
                 "--out", str(tmp_path / "r")]) == 0
    img = read_ppm(tmp_path / "r" / f"{format_timestamp(0.5)}.ppm")
    depth = read_pfm(tmp_path / "r" / f"{format_timestamp(0.5)}.pfm")
    lit = depth > 0
    assert 0 < lit.sum() < lit.size / 4
    assert np.all(img[..., 1:] == 0) and np.all(img[~lit] == 0)
    ref = render(m, PoseSE3.identity(), read_camera(corridor_small))
    assert np.allclose(img, ref.color, atol=0.5 / 255 + 1e-12)
    assert np.allclose(depth, ref.depth, rtol=1e-6, atol=0)


def test_render_empty_pose_file(tmp_path, corridor_small):
    GaussianMap().save_ply(tmp_path / "e.ply")
    (tmp_path / "p.txt").write_text("")
    assert main(["render", str(tmp_path / "e.ply"), str(tmp_path / "p.txt"), "--dataset", str(corridor_small),
                 "--out", str(tmp_path / "r")]) == 0
    assert list((tmp_path / "r").iterdir()) == []


def test_eval_identical_trajectories(tmp_path, corridor_small):
    gt = corridor_small / "gt_trajectory.txt"
    assert main(["eval", "--est", str(gt), "--gt", str(gt), "--out", str(tmp_path / "m.jsonl")]) == 0
    row = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert row["ate_rmse"] < 1e-9


def test_eval_images(tmp_path, corridor_small, capsys):
    imgs = corridor_small / "images"
    assert main(["eval", "--rendered", str(imgs), "--target", str(imgs), "--out", str(tmp_path / "m.jsonl")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert len(rows) == 12 and all(r["ssim"] == pytest.approx(1.0) for r in rows)
    few = tmp_path / "few"
    few.mkdir()
    write_ppm(few / "a.ppm", np.zeros((4, 4, 3)))
    assert main(["eval", "--rendered", str(few), "--target", str(imgs)]) == 2
    err = capsys.readouterr().err
    assert str(few) in err and str(imgs) in err


def test_slam_missing_dataset(tmp_path, capsys):
    assert main(["slam", str(tmp_path / "missing")]) == 2
    assert "missing" in capsys.readouterr().err


def test_help_lists_every_config_field(capsys):
    with pytest.raises(SystemExit):
        main(["slam", "--help"])
    text = capsys.readouterr().out
    lines = RunConfig().serialize().splitlines()
    assert len(lines) == len(dataclasses.fields(RunConfig))
    for line in lines:
        key, value = line.split(" = ")
        assert re.search(rf"^\s+{key}\s+{re.escape(value)}$", text, re.M), line


def test_config_roundtrip():
    cfg = RunConfig().update(seed=7, lambda1=0.25)
    text = cfg.serialize()
    assert RunConfig.parse(text) == cfg
    assert RunConfig.parse(text).serialize() == text


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig.parse("no_such_key = 1")


def test_tracking_lost_flushes_partial_outputs(tmp_path, capsys):
    spec = tmp_path / "wall.json"
    spec.write_text('{"surfaces": [{"type": "plane", "center": [4, 0, 0], "normal": [-1, 0, 0], "size": [30, 30],'
                    ' "u_axis": [0, 1, 0], "checker": 0.7}], "trajectory": {"frames": 4, "end": [0.3, 0, 0]},'
                    ' "camera": {"width": 32, "height": 24, "fx": 20}, "lidar": {"points": 500}}')
    assert main(["simulate", str(spec), "--out", str(tmp_path / "d")]) == 0
    out = tmp_path / "o"
    assert main(["slam", str(tmp_path / "d"), "--threads", "1", "--out", str(out)]) == 3
    assert "tracking lost" in capsys.readouterr().err
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] != "ok"
    assert (out / "trajectory.txt").exists() and (out / "map.ply").exists()
