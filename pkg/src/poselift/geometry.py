"""Pinhole camera model, hand skeleton, and pose/frame containers.

Conventions: right-handed camera frame, z increases away from the camera,
pixel origin at the top-left corner. All 3D quantities are millimeters,
all 2D quantities are pixels. Depth value 0 marks a missing measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MISSING_DEPTH = 0.0


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Skeleton:
    """Joint tree rooted at joint 0 with fixed bone lengths.

    ``parent[k]`` is the parent joint of k; the root maps to itself.
    ``bone_lengths[k]`` is the distance in mm between joint k and its
    parent; the root entry is 0 and never used.
    """

    parent: tuple[int, ...]
    bone_lengths: tuple[float, ...]
    joint_names: tuple[str, ...] = ()

    def __post_init__(self):
        k = len(self.parent)
        if k < 2:
            raise GeometryError("skeleton needs at least 2 joints")
        if len(self.bone_lengths) != k:
            raise GeometryError("bone_lengths must have one entry per joint")
        if self.parent[0] != 0:
            raise GeometryError("joint 0 must be the root (its own parent)")
        seen: set[int] = set()
        for j in range(1, k):
            p = self.parent[j]
            if not (0 <= p < k) or p == j:
                raise GeometryError(f"joint {j} has invalid parent {p}")
            # climbing to the root must terminate: tree, no cycles
            cur, hops = j, 0
            while cur != 0:
                cur = self.parent[cur]
                hops += 1
                if hops > k:
                    raise GeometryError("parent map contains a cycle")
            if self.bone_lengths[j] <= 0:
                raise GeometryError(f"bone length of joint {j} must be positive")
            seen.add(j)

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def children(self, k: int) -> list[int]:
        return [j for j in range(1, self.joint_count) if self.parent[j] == k]

    def topological_order(self) -> list[int]:
        """Joints ordered so every parent precedes its children."""
        order = [0]
        pending = set(range(1, self.joint_count))
        while pending:
            ready = [j for j in pending if self.parent[j] not in pending]
            ready.sort()
            order.extend(ready)
            pending -= set(ready)
        return order

    def to_dict(self) -> dict:
        return {
            "parent": list(self.parent),
            "bone_lengths": list(self.bone_lengths),
            "joint_names": list(self.joint_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(
            tuple(int(p) for p in d["parent"]),
            tuple(float(b) for b in d["bone_lengths"]),
            tuple(d.get("joint_names", ())),
        )


@dataclass(frozen=True)
class Pose3D:
    """K joint locations in camera coordinates (mm) for one frame."""

    frame_index: int
    joints: np.ndarray  # (K, 3) float64

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.ndim != 2 or j.shape[1] != 3:
            raise GeometryError("joints must be a (K, 3) array")
        if not np.all(np.isfinite(j[:, 2])):
            raise GeometryError("joint depths must be finite")
        object.__setattr__(self, "joints", j)

    @property
    def joint_count(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class DepthFrame:
    """A single depth map in mm; 0 marks missing measurements."""

    index: int
    pixels: np.ndarray  # (height, width) float64, mm
    intrinsics: CameraIntrinsics
    _valid: np.ndarray = field(default=None, repr=False, compare=False)
    _valid_u8: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.shape != (self.intrinsics.height, self.intrinsics.width):
            raise GeometryError("pixel array does not match intrinsics size")
        if np.any(px < 0):
            raise GeometryError("depths must be non-negative (0 = missing)")
        valid = px > 0
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "_valid", valid)
        # the compiled kernels take uint8 masks; cache the conversion once
        object.__setattr__(self, "_valid_u8", np.ascontiguousarray(valid, dtype=np.uint8))

    @property
    def valid_mask(self) -> np.ndarray:
        return self._valid

    @property
    def valid_u8(self) -> np.ndarray:
        return self._valid_u8

    def depth_at(self, xy) -> float:
        """Depth at a (possibly fractional) pixel location.

        Bilinear over the four neighbors when all are valid, otherwise the
        nearest valid neighbor, otherwise MISSING_DEPTH. Out-of-image
        locations are clamped to the border first.
        """
        h, w = self.pixels.shape
        x = min(max(float(xy[0]), 0.0), w - 1.0)
        y = min(max(float(xy[1]), 0.0), h - 1.0)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0
        corners = ((x0, y0), (x1, y0), (x0, y1), (x1, y1))
        vals = [self.pixels[cy, cx] for cx, cy in corners]
        ok = [v > 0 for v in vals]
        if all(ok):
            top = vals[0] * (1 - fx) + vals[1] * fx
            bot = vals[2] * (1 - fx) + vals[3] * fx
            return top * (1 - fy) + bot * fy
        best, best_d2 = MISSING_DEPTH, np.inf
        for (cx, cy), v, o in zip(corners, vals, ok):
            if o:
                d2 = (cx - x) ** 2 + (cy - y) ** 2
                if d2 < best_d2:
                    best, best_d2 = v, d2
        return best


def project(point: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of 3D camera-space point(s) to pixels.

    Accepts a single (3,) point or an (N, 3) array.
    """
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = p[:, 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project points with non-positive depth")
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = cam.fx * p[:, 0] / z + cam.cx
    uv[:, 1] = cam.fy * p[:, 1] / z + cam.cy
    return uv[0] if single else uv


def projection_jacobian(point: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """2x3 Jacobian of project() at a single 3D point."""
    x, y, z = (float(v) for v in point)
    if z <= 0:
        raise GeometryError("cannot project points with non-positive depth")
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )


def backprojection_jacobian(pixel, depth, cam: CameraIntrinsics) -> np.ndarray:
    """3x3 Jacobian of backproject() with respect to (u, v, depth)."""
    u, v = (float(c) for c in pixel)
    z = float(depth)
    if z <= 0:
        raise GeometryError("cannot backproject with non-positive depth")
    return np.array(
        [
            [z / cam.fx, 0.0, (u - cam.cx) / cam.fx],
            [0.0, z / cam.fy, (v - cam.cy) / cam.fy],
            [0.0, 0.0, 1.0],
        ]
    )


def backproject(pixel: np.ndarray, depth, cam: CameraIntrinsics) -> np.ndarray:
    """Inverse pinhole: pixel(s) + depth(s) in mm to camera-space point(s)."""
    l = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    single = l.ndim == 1
    l = np.atleast_2d(l)
    z = np.atleast_1d(z)
    if np.any(z <= 0):
        raise GeometryError("cannot backproject with non-positive depth")
    out = np.empty((l.shape[0], 3))
    out[:, 0] = (l[:, 0] - cam.cx) * z / cam.fx
    out[:, 1] = (l[:, 1] - cam.cy) * z / cam.fy
    out[:, 2] = z
    return out[0] if single else out


def measure_bone_lengths(frame: DepthFrame, annot_2d: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Bone lengths from a flat calibration pose annotated in 2D.

    Backprojects every annotated joint at the sensor depth and measures
    the distance to its parent. The hand must be fully visible, flat, and
    parallel to the image plane for the result to be meaningful.

    Returns a per-joint array; entry 0 (root) is 0. Raises GeometryError
    listing the offending joints when depth is missing at any annotation.
    """
    annot = np.asarray(annot_2d, dtype=np.float64)
    if annot.shape != (skeleton.joint_count, 2):
        raise GeometryError("annotation must provide one 2D point per joint")
    depths = np.array([frame.depth_at(annot[k]) for k in range(skeleton.joint_count)])
    missing = [k for k in range(skeleton.joint_count) if depths[k] <= 0]
    if missing:
        raise GeometryError(f"missing depth at annotated joints {missing}")
    pts = backproject(annot, depths, frame.intrinsics)
    lengths = np.zeros(skeleton.joint_count)
    for k in range(1, skeleton.joint_count):
        lengths[k] = float(np.linalg.norm(pts[k] - pts[skeleton.parent[k]]))
        if lengths[k] == 0.0:
            import warnings

            warnings.warn(f"joints {k} and {skeleton.parent[k]} annotated at the same point")
    return lengths


def bone_length_violation(pose: Pose3D, skeleton: Skeleton) -> float:
    """Largest absolute bone-length error of a pose in mm."""
    worst = 0.0
    for k in range(1, skeleton.joint_count):
        d = np.linalg.norm(pose.joints[k] - pose.joints[skeleton.parent[k]])
        worst = max(worst, abs(d - skeleton.bone_lengths[k]))
    return worst


MSRA_JOINT_NAMES = (
    "wrist",
    "thumb_mcp", "thumb_pip", "thumb_dip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)


def default_skeleton() -> Skeleton:
    """21-joint hand: wrist root plus MCP/PIP/DIP/TIP per finger."""
    parent = [0] * 21
    lengths = [0.0] * 21
    # (palm bone wrist->MCP, proximal, middle, distal) per finger, mm
    finger_bones = {
        "thumb": (38.0, 42.0, 30.0, 24.0),
        "index": (84.0, 42.0, 26.0, 22.0),
        "middle": (82.0, 46.0, 29.0, 24.0),
        "ring": (78.0, 42.0, 27.0, 23.0),
        "pinky": (74.0, 32.0, 21.0, 19.0),
    }
    for f, name in enumerate(("thumb", "index", "middle", "ring", "pinky")):
        base = 1 + 4 * f
        parent[base] = 0
        lengths[base] = finger_bones[name][0]
        for s in range(1, 4):
            parent[base + s] = base + s - 1
            lengths[base + s] = finger_bones[name][s]
    return Skeleton(tuple(parent), tuple(lengths), MSRA_JOINT_NAMES)
