"""End-to-end pipeline: ingest, tracking, keyframe back-end, outputs."""
from __future__ import annotations

import json
import logging
import queue
import threading
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .backend import Backend, BackendParams
from .config import RunConfig
from .core import PoseSE3
from .fileio import write_tum
from .gaussian_map import GaussianMap, init_skybox
from .metrics import psnr
from .renderer import render
from .sensor import SequenceConfig, SequenceReader
from .tracking import (TrackingLost, TrackingParams, TrackingTarget, covisibility, keyframe_decision,
                       track_frame)

log = logging.getLogger(__name__)


def tracking_params(cfg: RunConfig) -> TrackingParams:
    return TrackingParams(max_iterations=cfg.max_iterations, tolerance=cfg.tolerance, min_inliers=cfg.min_inliers,
                          max_dist=cfg.max_dist, lambda_r=cfg.lambda_r, robust=cfg.robust,
                          use_weights=cfg.use_weights, weight_mode=cfg.weight_mode)


def backend_params(cfg: RunConfig) -> BackendParams:
    return BackendParams(lambda1=cfg.lambda1, lambda2=cfg.lambda2, pose_iters=cfg.pose_iters,
                         map_iters=cfg.map_iters, batch_size=cfg.batch_size, window=cfg.backend_window,
                         lr_pose=cfg.lr_pose, lr_means=cfg.lr_means, lr_log_scales=cfg.lr_log_scales,
                         lr_quats=cfg.lr_quats,
                         lr_opacity=cfg.lr_opacity, lr_colors=cfg.lr_colors, opacity_floor=cfg.opacity_floor,
                         stale_window=cfg.submap_window, color_only_stride=cfg.color_only_stride,
                         cgc_children=cfg.cgc_children, freeze_anchored=cfg.freeze_anchored, seed=cfg.seed,
                         threads=cfg.threads if cfg.threads > 0 else None)


class SlamRun:
    """State of one run; ``run`` drives it over a dataset directory."""

    def __init__(self, dataset, cfg: Optional[RunConfig] = None):
        self.cfg = cfg or RunConfig()
        self.reader = SequenceReader(dataset, SequenceConfig(self.cfg.pair_tolerance, self.cfg.normals_k))
        if self.reader.camera is None or len(self.reader) == 0:
            raise ValueError(f"no usable image/scan pairs in {dataset}")
        self.cam = self.reader.camera
        self.map = GaussianMap(window_size=self.cfg.submap_window)
        self.backend = Backend(self.map, self.cam, backend_params(self.cfg))
        self.tparams = tracking_params(self.cfg)
        self.stamps: list[float] = []
        self.poses: list[PoseSE3] = []
        self.kf_frames: list[int] = []        # frame position -> keyframe record
        self.kf_records = {}
        self.status = "ok"
        self.error = ""
        self.seconds = 0.0

    # -- sequential mode ------------------------------------------------------
    def _keyframe(self, frame, pose):
        kf = self.backend.enqueue(frame, pose)
        self.kf_records[len(self.poses) - 1] = kf
        self.backend.backend_step()
        if len(self.backend.keyframes) == 1 and self.cfg.skybox_count > 0:
            init_skybox(self.map, self.cfg.skybox_count, self.cfg.skybox_radius, pose.translation, frame.index)
        return kf

    def run(self):
        sequential = self.cfg.threads == 1
        t0 = time.perf_counter()
        try:
            if sequential:
                self._run_sequential()
            else:
                self._run_threaded()
        except TrackingLost as exc:
            self.status = "tracking_lost"
            self.error = str(exc)
            raise
        finally:
            self.seconds = time.perf_counter() - t0
        return self

    def _run_sequential(self):
        target = None
        last_kf_pose = None
        for frame in self.reader:
            if target is None:
                pose = PoseSE3.identity()
                self.stamps.append(frame.timestamp)
                self.poses.append(pose)
                kf = self._keyframe(frame, pose)
                last_kf_pose = kf.pose
                target = TrackingTarget(self.map, use_weights=self.tparams.use_weights, mode=self.tparams.weight_mode)
                continue
            res = track_frame(frame, target, self.poses[-1], self.tparams)
            self.stamps.append(frame.timestamp)
            self.poses.append(res.pose)
            if keyframe_decision(covisibility(self.map, last_kf_pose, res.pose, self.cam), self.cfg.covis_threshold):
                kf = self._keyframe(frame, res.pose)
                last_kf_pose = kf.pose
                target = TrackingTarget(self.map, use_weights=self.tparams.use_weights, mode=self.tparams.weight_mode)

    # -- tracking thread + back-end thread -------------------------------------
    def _run_threaded(self):
        packets: queue.Queue = queue.Queue()
        published = {"map": None, "version": 0}
        lock = threading.Lock()
        failure = []

        def worker():
            try:
                while True:
                    item = packets.get()
                    if item is None:
                        break
                    frame, pose, pos = item
                    self.kf_records[pos] = self.backend.enqueue(frame, pose)
                    # drain whatever else is queued into the same batch
                    stop = False
                    while len(self.backend.queue) < self.backend.params.batch_size:
                        try:
                            nxt = packets.get_nowait()
                        except queue.Empty:
                            break
                        if nxt is None:
                            stop = True
                            break
                        self.kf_records[nxt[2]] = self.backend.enqueue(nxt[0], nxt[1])
                    while self.backend.queue:
                        first = not self.backend.keyframes
                        self.backend.backend_step()
                        if first and self.cfg.skybox_count > 0:
                            init_skybox(self.map, self.cfg.skybox_count, self.cfg.skybox_radius,
                                        self.backend.keyframes[0].pose.translation, self.backend.keyframes[0].frame.index)
                        snap = self.map.copy()
                        with lock:
                            published["map"] = snap
                            published["version"] += 1
                    if stop:
                        break
            except Exception as exc:            # surfaced on the tracking side
                failure.append(exc)

        th = threading.Thread(target=worker, daemon=True)
        th.start()
        target = None
        seen_version = 0
        snapshot = None
        last_kf_pose = None
        try:
            for frame in self.reader:
                if failure:
                    raise failure[0]
                if not self.poses:
                    pose = PoseSE3.identity()
                    self.stamps.append(frame.timestamp)
                    self.poses.append(pose)
                    packets.put((frame, pose, 0))
                    last_kf_pose = pose
                    # nothing to track against until the first map exists
                    while True:
                        with lock:
                            if published["version"] > 0:
                                break
                        if failure:
                            raise failure[0]
                        time.sleep(0.001)
                    continue
                with lock:
                    if published["version"] != seen_version:
                        seen_version = published["version"]
                        snapshot = published["map"]
                        target = TrackingTarget(snapshot, use_weights=self.tparams.use_weights,
                                                mode=self.tparams.weight_mode)
                res = track_frame(frame, target, self.poses[-1], self.tparams)
                self.stamps.append(frame.timestamp)
                self.poses.append(res.pose)
                if keyframe_decision(covisibility(snapshot, last_kf_pose, res.pose, self.cam), self.cfg.covis_threshold):
                    packets.put((frame, res.pose, len(self.poses) - 1))
                    last_kf_pose = res.pose
        finally:
            packets.put(None)
            th.join()
        if failure:
            raise failure[0]

    # -- outputs ---------------------------------------------------------------
    def trajectory(self):
        """Per-frame poses; keyframes report their back-end refined pose."""
        poses = list(self.poses)
        for pos, kf in self.kf_records.items():
            if pos < len(poses):
                poses[pos] = kf.pose
        return self.stamps, poses

    def training_psnr(self) -> list:
        out = []
        for kf in self.backend.keyframes:
            img = render(self.map, kf.pose, self.cam).color
            out.append({"frame": int(kf.frame.index), "timestamp": float(kf.frame.timestamp),
                        "psnr": psnr(np.clip(img, 0.0, 1.0), kf.frame.image)})
        return out

    def write_outputs(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stamps, poses = self.trajectory()
        write_tum(out / "trajectory.txt", stamps, poses)
        self.map.save_ply(out / "map.ply")
        self.backend.write_log(out / "loss.csv")
        (out / "config.txt").write_text(self.cfg.serialize())
        n = len(self.poses)
        summary = {
            "status": self.status,
            "error": self.error,
            "frames": n,
            "keyframes": len(self.backend.keyframes),
            "skipped": self.reader.skipped,
            "map_size": len(self.map),
            "total_seconds": self.seconds,
            "fps": n / self.seconds if self.seconds > 0 else 0.0,
            "training_psnr": self.training_psnr(),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return summary


def run_slam(dataset, cfg: Optional[RunConfig] = None, out_dir=None):
    """Run the pipeline; outputs are written (even after TrackingLost) when ``out_dir`` is given."""
    run = SlamRun(dataset, cfg)
    try:
        run.run()
    finally:
        if out_dir is not None:
            run.write_outputs(out_dir)
    return run
