"""Simulated annotator backed by ground truth.

Produces the same kind of 2D annotations a human would: clicked joint
locations (optionally with Gaussian click noise), visibility read off
the rendered z-buffer, and closer/farther-than-parent tags from the
true depths. Corrections return the exact noiseless projection.
"""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, DepthFrame, Pose3D, project
from ..refinit import ZORDER_CLOSER, ZORDER_FARTHER, ZORDER_NONE, Annotation2D
from .model import HandModel

VISIBILITY_MARGIN_MM = 5.0


def _clamp_points(pts: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    out = pts.copy()
    out[:, 0] = np.clip(out[:, 0], 0.0, cam.width - 1.0)
    out[:, 1] = np.clip(out[:, 1], 0.0, cam.height - 1.0)
    return out


def _visibility(gt: Pose3D, frame: DepthFrame, model: HandModel,
                proj: np.ndarray) -> np.ndarray:
    """v=1 iff the rendered surface at the joint's projection is within
    capsule radius + margin of the joint depth (z-buffer test)."""
    h, w = frame.pixels.shape
    k = gt.joint_count
    vis = np.zeros(k, dtype=bool)
    for j in range(k):
        u = int(np.rint(min(max(proj[j, 0], 0.0), w - 1.0)))
        v = int(np.rint(min(max(proj[j, 1], 0.0), h - 1.0)))
        d = frame.pixels[v, u]
        if d <= 0:
            continue
        margin = model.joint_radius(j) + VISIBILITY_MARGIN_MM
        vis[j] = abs(gt.joints[j, 2] - d) <= margin
    return vis


def _zorder(gt: Pose3D, visible: np.ndarray, parents) -> np.ndarray:
    k = gt.joint_count
    zo = np.zeros(k, dtype=np.int8)
    for j in range(1, k):
        if not visible[j]:
            continue
        zj = gt.joints[j, 2]
        zp = gt.joints[parents[j], 2]
        # ties count as farther
        zo[j] = ZORDER_CLOSER if zj < zp else ZORDER_FARTHER
    return zo


def oracle_annotate(gt: Pose3D, frame: DepthFrame, model: HandModel,
                    noise_sigma: float = 0.0, seed: int = 0) -> Annotation2D:
    """Annotate one frame from ground truth; noise_sigma is the stddev of
    the per-coordinate Gaussian click error in px."""
    cam = frame.intrinsics
    proj = project(gt.joints, cam)
    pts = proj.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    pts = _clamp_points(pts, cam)
    vis = _visibility(gt, frame, model, proj)
    zo = _zorder(gt, vis, model.skeleton.parent)
    return Annotation2D(gt.frame_index, pts, vis, zo)


def oracle_correct(gt: Pose3D, joint: int, cam: CameraIntrinsics) -> np.ndarray:
    """The exact projection of one ground-truth joint (a perfect click)."""
    return project(gt.joints[joint], cam)


class Oracle:
    """Ground-truth-backed annotator over a whole sequence."""

    def __init__(self, gt_poses, frames, model: HandModel):
        self.gt = {p.frame_index: p for p in gt_poses}
        self.frames = {f.index: f for f in frames}
        self.model = model

    def annotate(self, frame_index: int, noise_sigma: float = 0.0,
                 seed: int = 0) -> Annotation2D:
        # derive a per-frame stream so noise is independent across frames
        return oracle_annotate(self.gt[frame_index], self.frames[frame_index],
                               self.model, noise_sigma,
                               seed * 100003 + frame_index)

    def correct(self, frame_index: int, joint: int) -> np.ndarray:
        frame = self.frames[frame_index]
        return oracle_correct(self.gt[frame_index], joint, frame.intrinsics)

    def truth_projections(self, frame_index: int) -> np.ndarray:
        frame = self.frames[frame_index]
        return project(self.gt[frame_index].joints, frame.intrinsics)
