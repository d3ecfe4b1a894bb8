"""Project directory I/O: 16-bit depth images and canonical JSON.

Documents are serialized with sorted keys and fixed separators so that
save -> load -> save is byte-identical; floats use Python's shortest
round-trip repr.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from ..geometry import CameraIntrinsics, DepthFrame, GeometryError, Pose3D, Skeleton

FRAME_PATTERN = "depth_%05d.png"


def dumps_canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def write_json(path: str, doc) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(dumps_canonical(doc))
    os.replace(tmp, path)


def read_json(path: str):
    with open(path) as f:
        return json.load(f)


def write_depth_png(path: str, depth_mm: np.ndarray) -> None:
    """Depth in mm as 16-bit grayscale PNG, 1mm quantization."""
    arr = np.asarray(depth_mm)
    if arr.min() < 0 or arr.max() > 65535:
        raise GeometryError("depth outside the 16-bit mm range")
    img = Image.fromarray(np.round(arr).astype(np.uint16), mode="I;16")
    tmp = path + ".tmp"
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def read_depth_png(path: str) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32):
        raise GeometryError(f"{path}: expected a 16-bit depth image")
    return arr.astype(np.float64)


def depth_to_grayscale_png(depth_mm: np.ndarray, near: float = None,
                           far: float = None) -> Image.Image:
    """Viewable 8-bit rendering: valid depths mapped near->bright,
    far->dark, missing black."""
    arr = np.asarray(depth_mm, dtype=np.float64)
    valid = arr > 0
    if not valid.any():
        return Image.fromarray(np.zeros(arr.shape, dtype=np.uint8), mode="L")
    lo = float(near if near is not None else arr[valid].min())
    hi = float(far if far is not None else arr[valid].max())
    if hi <= lo:
        hi = lo + 1.0
    t = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    out = np.where(valid, np.round(255 * (1.0 - 0.85 * t)), 0).astype(np.uint8)
    return Image.fromarray(out, mode="L")


def save_frames(dirpath: str, frames) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for f in frames:
        write_depth_png(os.path.join(dirpath, FRAME_PATTERN % f.index), f.pixels)


def load_frames(dirpath: str, cam: CameraIntrinsics, n: int):
    out = []
    for i in range(n):
        path = os.path.join(dirpath, FRAME_PATTERN % i)
        if not os.path.exists(path):
            raise GeometryError(f"missing frame image {path}")
        out.append(DepthFrame(i, read_depth_png(path), cam))
    return out


def poses_to_doc(poses, skeleton: Skeleton = None) -> dict:
    doc = {"frames": [{"frame_index": p.frame_index,
                       "joints": [[float(c) for c in row] for row in p.joints]}
                      for p in poses]}
    if skeleton is not None:
        doc["skeleton"] = skeleton.to_dict()
    return doc


def poses_from_doc(doc: dict):
    return [Pose3D(f["frame_index"], np.asarray(f["joints"], dtype=np.float64))
            for f in doc["frames"]]


def pose_table_text(poses) -> str:
    """Flat per-joint export: frame joint x y z, one row per joint."""
    lines = ["frame joint x y z"]
    for p in poses:
        for j, (x, y, z) in enumerate(p.joints):
            lines.append("%d %d %.6f %.6f %.6f" % (p.frame_index, j, x, y, z))
    return "\n".join(lines) + "\n"
