"""Capsule hand model and forward kinematics.

The hand lives in a local frame with the wrist at the origin, fingers
pointing along +y and the palm normal along -z (facing the camera when
the global rotation is identity). Flexion angles bend finger segments
toward the camera. All joint positions come out of unit direction
vectors scaled by the skeleton bone lengths, so ground-truth poses
satisfy the bone-length constraints to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import GeometryError, Pose3D, Skeleton, default_skeleton

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# in-palm fan angle of each finger's base direction, degrees about local z
DEFAULT_AZIMUTH_DEG = (58.0, 16.0, 0.0, -14.0, -28.0)
# constant out-of-plane tilt of the thumb column toward the camera
DEFAULT_THUMB_TILT_DEG = 25.0


@dataclass(frozen=True)
class HandModel:
    """Skeleton plus the capsule geometry used for rendering.

    bone_radii[k] is the radius of the capsule from parent(k) to k (root
    entry unused, 0 allowed). palm_links are extra capsules (j1, j2, r)
    that fill in the palm between the wrist-to-MCP bones.
    """

    skeleton: Skeleton
    bone_radii: tuple[float, ...]
    palm_links: tuple[tuple[int, int, float], ...] = ()
    finger_azimuth_deg: tuple[float, ...] = DEFAULT_AZIMUTH_DEG
    thumb_tilt_deg: float = DEFAULT_THUMB_TILT_DEG

    def __post_init__(self):
        k = self.skeleton.joint_count
        if len(self.bone_radii) != k:
            raise GeometryError("bone_radii must have one entry per joint")
        if any(r <= 0 for r in self.bone_radii[1:]):
            raise GeometryError("bone radii must be positive")
        for j1, j2, r in self.palm_links:
            if not (0 <= j1 < k and 0 <= j2 < k) or j1 == j2:
                raise GeometryError(f"palm link ({j1},{j2}) references bad joints")
            if r <= 0:
                raise GeometryError("palm link radius must be positive")
        if len(self.finger_azimuth_deg) != 5:
            raise GeometryError("need one azimuth per finger")

    def joint_radius(self, k: int) -> float:
        """Largest capsule radius touching joint k (visibility margin)."""
        rs = [self.bone_radii[k]] if k > 0 else []
        rs += [self.bone_radii[c] for c in self.skeleton.children(k)]
        rs += [r for j1, j2, r in self.palm_links if k in (j1, j2)]
        return max(rs) if rs else 10.0


def default_hand_model() -> HandModel:
    """Adult-sized hand: fat palm capsules, tapering finger segments."""
    skel = default_skeleton()
    radii = [0.0] * 21
    # per finger: (palm bone, proximal, middle, distal) radii in mm
    finger_radii = {
        "thumb": (14.0, 10.0, 8.5, 7.5),
        "index": (13.0, 8.5, 7.5, 6.5),
        "middle": (13.0, 9.0, 8.0, 7.0),
        "ring": (13.0, 8.5, 7.5, 6.5),
        "pinky": (12.0, 7.5, 6.5, 6.0),
    }
    for f, name in enumerate(FINGER_NAMES):
        base = 1 + 4 * f
        for s in range(4):
            radii[base + s] = finger_radii[name][s]
    # cross links between neighboring MCPs close the palm surface
    links = ((5, 9, 12.0), (9, 13, 12.0), (13, 17, 11.0), (1, 5, 11.0))
    return HandModel(skel, tuple(radii), links)


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    return Rotation.from_rotvec(axis * angle).as_matrix()


def fk(model: HandModel, translation, rotation_xyz, flexion) -> np.ndarray:
    """Joint centers (K, 3) in camera space.

    translation: (3,) mm offset of the wrist. rotation_xyz: (3,) extrinsic
    xyz Euler angles in radians applied to the whole hand. flexion: (5, 3)
    radians per finger for the MCP/PIP/DIP hinges; positive bends toward
    the camera (-z in the local frame).
    """
    t = np.asarray(translation, dtype=np.float64)
    flex = np.asarray(flexion, dtype=np.float64)
    if flex.shape != (5, 3):
        raise GeometryError("flexion must be (5, 3)")
    rg = Rotation.from_euler("xyz", np.asarray(rotation_xyz, dtype=np.float64)).as_matrix()

    skel = model.skeleton
    joints = np.zeros((skel.joint_count, 3))
    joints[0] = t

    for f in range(5):
        base = 1 + 4 * f
        az = np.deg2rad(model.finger_azimuth_deg[f])
        rz = Rotation.from_euler("z", az).as_matrix()
        u = rz @ np.array([0.0, 1.0, 0.0])       # finger column direction
        hinge = rz @ np.array([-1.0, 0.0, 0.0])  # flexion axis, +angle -> -z
        if f == 0:
            tilt = _rodrigues(hinge, np.deg2rad(model.thumb_tilt_deg))
            u = tilt @ u
        joints[base] = joints[0] + rg @ (u * skel.bone_lengths[base])
        d = u
        for s in range(3):
            d = _rodrigues(hinge, float(flex[f, s])) @ d
            j = base + 1 + s
            joints[j] = joints[j - 1] + rg @ (d * skel.bone_lengths[j])
    return joints


def capsules_for_pose(model: HandModel, joints: np.ndarray):
    """Capsule segments for rendering: (seg_a, seg_b, radii) arrays."""
    skel = model.skeleton
    seg_a, seg_b, radii = [], [], []
    for k in range(1, skel.joint_count):
        seg_a.append(joints[skel.parent[k]])
        seg_b.append(joints[k])
        radii.append(model.bone_radii[k])
    for j1, j2, r in model.palm_links:
        seg_a.append(joints[j1])
        seg_b.append(joints[j2])
        radii.append(r)
    return (np.ascontiguousarray(seg_a, dtype=np.float64),
            np.ascontiguousarray(seg_b, dtype=np.float64),
            np.ascontiguousarray(radii, dtype=np.float64))
