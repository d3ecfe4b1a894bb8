"""Keyframed hand motion scripts.

A script is a list of (time, PoseParams) keyframes over normalized time
[0, 1]; frame i of an N-frame sequence samples time i/(N-1). Uneven
keyframe spacing gives speed variation, repeated params give pose
revisits; both matter for exercising reference-frame selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import GeometryError

# anatomical hinge range, radians (slight hyperextension to full curl)
FLEX_MIN = -0.35
FLEX_MAX = 2.1


@dataclass(frozen=True)
class PoseParams:
    """Global translation (mm), xyz Euler rotation (rad), flexion (5,3) rad."""

    translation: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    flexion: tuple[tuple[float, float, float], ...] = tuple((0.0, 0.0, 0.0) for _ in range(5))

    def __post_init__(self):
        if len(self.flexion) != 5 or any(len(f) != 3 for f in self.flexion):
            raise GeometryError("flexion must be 5 fingers x 3 hinges")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.translation, dtype=np.float64),
            np.asarray(self.rotation, dtype=np.float64),
            np.asarray(self.flexion, dtype=np.float64).ravel(),
        ])

    @staticmethod
    def from_vector(v: np.ndarray) -> "PoseParams":
        v = np.asarray(v, dtype=np.float64)
        return PoseParams(
            tuple(v[0:3]),
            tuple(v[3:6]),
            tuple(tuple(row) for row in v[6:21].reshape(5, 3)),
        )


@dataclass(frozen=True)
class MotionScript:
    """Keyframes at strictly increasing times 0..1 plus a frame count."""

    keyframes: tuple[tuple[float, PoseParams], ...]
    n_frames: int
    interpolation: str = "smooth"  # "linear" | "smooth"

    def __post_init__(self):
        if self.n_frames < 1:
            raise GeometryError("n_frames must be >= 1")
        if not self.keyframes:
            raise GeometryError("need at least one keyframe")
        times = [t for t, _ in self.keyframes]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise GeometryError("keyframe times must be strictly increasing")
        if times[0] != 0.0 or (len(times) > 1 and times[-1] != 1.0):
            raise GeometryError("keyframes must start at 0 and end at 1")
        if self.interpolation not in ("linear", "smooth"):
            raise GeometryError(f"unknown interpolation {self.interpolation!r}")
        for t, p in self.keyframes:
            fl = np.asarray(p.flexion)
            if np.any(fl < FLEX_MIN) or np.any(fl > FLEX_MAX):
                raise GeometryError(f"keyframe at t={t} has flexion outside "
                                    f"[{FLEX_MIN}, {FLEX_MAX}] rad")

    def params_at(self, frame: int) -> PoseParams:
        if not (0 <= frame < self.n_frames):
            raise GeometryError(f"frame {frame} outside script of {self.n_frames}")
        if self.n_frames == 1 or len(self.keyframes) == 1:
            return self.keyframes[0][1]
        u = frame / (self.n_frames - 1)
        times = [t for t, _ in self.keyframes]
        hi = int(np.searchsorted(times, u, side="right"))
        hi = min(max(hi, 1), len(times) - 1)
        t0, p0 = self.keyframes[hi - 1]
        t1, p1 = self.keyframes[hi]
        s = (u - t0) / (t1 - t0)
        s = min(max(s, 0.0), 1.0)
        if self.interpolation == "smooth":
            s = s * s * (3.0 - 2.0 * s)
        v = (1.0 - s) * p0.as_vector() + s * p1.as_vector()
        return PoseParams.from_vector(v)


def _flex(thumb=0.0, index=0.0, middle=0.0, ring=0.0, pinky=0.0, curl=0.55):
    """Finger flexion block: one scalar per finger, distributed over the
    three hinges (distal hinges bend a bit less than the proximal one)."""
    out = []
    for a in (thumb, index, middle, ring, pinky):
        out.append((a, a * curl, a * curl * 0.8))
    return tuple(out)


def desk_script(n_frames: int = 300) -> MotionScript:
    """Default desk-scale recording: per-finger curls toward the camera
    layered over a slow stepwise yaw drift, with a fist, a pinch, a
    spread, and exact revisits of earlier poses. One thing changes per
    segment and segments span 9-15 frames at the default length, so the
    motion stays slow enough for appearance matching to track it, while
    the yaw drift keeps temporally distant frames visually distinct.
    Hand stays 465-540mm from the camera."""
    relax = _flex(thumb=0.12, index=0.12, middle=0.1, ring=0.12, pinky=0.15)
    index_curl = _flex(thumb=0.3, index=1.5, middle=0.12, ring=0.12, pinky=0.15)
    two_curl = _flex(thumb=0.35, index=1.35, middle=1.5, ring=0.15, pinky=0.15)
    fist = _flex(thumb=0.9, index=1.9, middle=1.95, ring=1.9, pinky=1.8)
    spread = _flex(thumb=-0.05, index=-0.12, middle=-0.1, ring=-0.1, pinky=-0.12)
    pinch = _flex(thumb=0.85, index=1.25, middle=0.18, ring=0.15, pinky=0.15)
    ring_curl = _flex(thumb=0.3, index=0.15, middle=0.12, ring=1.45, pinky=1.5)

    def p(yaw, art, x, y, z, pitch=0.0, roll=0.0):
        return PoseParams((x, y, z), (pitch, yaw, roll), art)

    home = p(0.00, relax, -5, 10, 475)
    mid_right = p(0.36, relax, 6, 4, 502, -0.03, 0.07)
    keys = (
        (0.000, home),
        (0.045, p(0.00, index_curl, -2, 12, 472, 0.02)),
        (0.085, p(0.00, relax, 2, 14, 470)),
        (0.125, p(-0.18, relax, 6, 16, 478, 0.02, -0.03)),
        (0.170, p(-0.18, two_curl, 8, 18, 482, 0.03, -0.03)),
        (0.215, p(-0.18, relax, 10, 18, 486, 0.02, -0.03)),
        (0.255, p(-0.36, relax, 14, 16, 494, 0.04, -0.06)),
        (0.300, p(-0.36, fist, 16, 14, 498, 0.05, -0.06)),
        (0.350, p(-0.36, relax, 18, 12, 502, 0.04, -0.06)),
        (0.390, p(-0.18, relax, 14, 10, 496, 0.02, -0.03)),
        (0.425, home),                                       # exact revisit
        (0.465, p(0.00, spread, -8, 8, 470, -0.03, 0.02)),
        (0.505, p(0.00, relax, -6, 6, 472)),
        (0.545, p(0.18, relax, -2, 4, 480, -0.02, 0.04)),
        (0.585, p(0.18, pinch, 0, 2, 486, -0.04, 0.05)),
        (0.625, p(0.18, relax, 2, 2, 492, -0.02, 0.04)),
        (0.665, mid_right),
        (0.705, p(0.36, ring_curl, 8, 6, 508, -0.04, 0.07)),
        (0.750, p(0.36, relax, 10, 8, 514, -0.03, 0.07)),
        (0.790, p(0.54, relax, 14, 10, 524, -0.05, 0.10)),
        (0.830, p(0.54, fist, 16, 12, 530, -0.06, 0.10)),
        (0.875, p(0.54, relax, 18, 14, 536, -0.05, 0.10)),
        (0.910, mid_right),                                  # exact revisit
        (0.940, p(0.18, index_curl, 2, 2, 494, -0.02, 0.04)),
        (0.970, p(0.18, relax, 0, 0, 488, -0.02, 0.04)),
        (1.000, p(0.00, fist, -2, 2, 478)),
    )
    return MotionScript(keys, n_frames)
