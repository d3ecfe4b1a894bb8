"""Depth rendering of the capsule hand via the z-buffer kernel."""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..geometry import CameraIntrinsics, DepthFrame, Pose3D
from .model import HandModel, capsules_for_pose, fk
from .motion import MotionScript


class RenderError(RuntimeError):
    pass


def _capsule_rects(seg_a, seg_b, radii, cam: CameraIntrinsics) -> np.ndarray:
    """Conservative per-capsule pixel bounds (x0, x1, y0, y1), end-exclusive.

    Projects both endpoint spheres and takes the union box plus a margin.
    Capsules too close to the camera plane, or entirely off-screen, get an
    empty rect and are skipped by the renderer.
    """
    n = seg_a.shape[0]
    rects = np.zeros((n, 4), dtype=np.int64)
    for b in range(n):
        r = radii[b]
        lo = np.array([np.inf, np.inf])
        hi = np.array([-np.inf, -np.inf])
        ok = True
        for p in (seg_a[b], seg_b[b]):
            z = p[2]
            if z <= r + 1.0:
                ok = False
                break
            u = cam.fx * p[0] / z + cam.cx
            v = cam.fy * p[1] / z + cam.cy
            # pixel radius of the endpoint sphere, padded for the slanted body
            ru = r * cam.fx / (z - r) + 2.0
            rv = r * cam.fy / (z - r) + 2.0
            lo = np.minimum(lo, (u - ru, v - rv))
            hi = np.maximum(hi, (u + ru, v + rv))
        if not ok:
            continue
        x0 = max(0, int(np.floor(lo[0])))
        y0 = max(0, int(np.floor(lo[1])))
        x1 = min(cam.width, int(np.ceil(hi[0])) + 1)
        y1 = min(cam.height, int(np.ceil(hi[1])) + 1)
        if x1 > x0 and y1 > y0:
            rects[b] = (x0, x1, y0, y1)
    return rects


def render_pose(model: HandModel, joints: np.ndarray, cam: CameraIntrinsics,
                frame_index: int = 0) -> DepthFrame:
    """Z-buffer one pose; raises RenderError if nothing is visible."""
    seg_a, seg_b, radii = capsules_for_pose(model, joints)
    rects = _capsule_rects(seg_a, seg_b, radii, cam)
    if not np.any(rects[:, 1] > rects[:, 0]):
        raise RenderError(f"hand fully outside view frustum at frame {frame_index}")
    z = kernels.capsule_zbuffer(cam.width, cam.height, cam.fx, cam.fy,
                                cam.cx, cam.cy, seg_a, seg_b, radii, rects)
    return DepthFrame(frame_index, z, cam)


def render_sequence(model: HandModel, script: MotionScript, cam: CameraIntrinsics,
                    seed: int = 0):
    """Render every frame of a script: (frames, ground-truth poses).

    Deterministic given (model, script, cam); the seed is reserved for
    future sensor-noise models and currently unused.
    """
    frames: list[DepthFrame] = []
    gt: list[Pose3D] = []
    for i in range(script.n_frames):
        p = script.params_at(i)
        joints = fk(model, p.translation, p.rotation, p.flexion)
        frames.append(render_pose(model, joints, cam, i))
        gt.append(Pose3D(i, joints))
    return frames, gt
