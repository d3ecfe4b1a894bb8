"""Lifting 2D reference-frame annotations to 3D poses.

Visible joints pull their reprojection toward the annotated pixel; bone
lengths, a depth window around the sensor measurement, and the
closer/farther-than-parent ordering enter as penalty-scheduled
constraints. Hidden joints carry no reprojection term and settle where
the bones and the behind-the-surface constraint put them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, DepthFrame, GeometryError, Pose3D,
                       Skeleton, backproject, project, projection_jacobian)
from .nlsolver import (ConstraintBlock, ConstraintSet, DEFAULT_SCHEDULE,
                       ResidualProblem, SolveReport, SolverOptions,
                       penalty_solve)

ZORDER_NONE = 0      # root, or hidden joint
ZORDER_CLOSER = 1    # joint depth less than parent depth
ZORDER_FARTHER = -1

_ZORDER_NAMES = {ZORDER_NONE: None, ZORDER_CLOSER: "closer", ZORDER_FARTHER: "farther"}
_ZORDER_VALUES = {None: ZORDER_NONE, "closer": ZORDER_CLOSER, "farther": ZORDER_FARTHER}


class RefInitError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Annotation2D:
    """Per-joint 2D click, visibility flag, and z-order vs parent.

    Every joint carries a 2D location (hidden joints get the annotator's
    best guess); zorder is meaningful only for visible non-root joints
    and ZORDER_NONE otherwise.
    """

    frame_index: int
    points: np.ndarray   # (K, 2) px
    visible: np.ndarray  # (K,) bool
    zorder: np.ndarray   # (K,) int8 in {-1, 0, 1}

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        zo = np.asarray(self.zorder, dtype=np.int8)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise GeometryError("points must be (K, 2)")
        k = pts.shape[0]
        if vis.shape != (k,) or zo.shape != (k,):
            raise GeometryError("visible/zorder must have one entry per joint")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("annotated points must be finite")
        if zo[0] != ZORDER_NONE:
            raise GeometryError("root joint cannot have a z-order")
        if not np.all(np.isin(zo, (-1, 0, 1))):
            raise GeometryError("zorder entries must be -1, 0, or 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "zorder", zo)

    @property
    def joint_count(self) -> int:
        return self.points.shape[0]

    def check_bounds(self, cam: CameraIntrinsics):
        ok = ((self.points[:, 0] >= 0) & (self.points[:, 0] <= cam.width - 1)
              & (self.points[:, 1] >= 0) & (self.points[:, 1] <= cam.height - 1))
        if not np.all(ok):
            bad = np.flatnonzero(~ok).tolist()
            raise GeometryError(f"annotated points outside image at joints {bad}")

    def to_dict(self) -> dict:
        return {
            "frame": int(self.frame_index),
            "joints": [
                {
                    "x": float(self.points[k, 0]),
                    "y": float(self.points[k, 1]),
                    "visible": bool(self.visible[k]),
                    "zorder": _ZORDER_NAMES[int(self.zorder[k])],
                }
                for k in range(self.joint_count)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation2D":
        js = d["joints"]
        pts = np.array([[j["x"], j["y"]] for j in js], dtype=np.float64)
        vis = np.array([bool(j["visible"]) for j in js])
        zo = np.array([_ZORDER_VALUES[j.get("zorder")] for j in js], dtype=np.int8)
        return cls(int(d["frame"]), pts, vis, zo)


@dataclass(frozen=True)
class RefInitConfig:
    """epsilon is the depth-window height in mm; the toggles exist for
    the constraint ablation (visibility covers both the depth window and
    the hidden-joint floor)."""

    epsilon: float = 15.0
    schedule: tuple = DEFAULT_SCHEDULE
    use_visibility: bool = True
    use_zorder: bool = True
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iter=60))

    def __post_init__(self):
        if self.epsilon <= 0:
            raise GeometryError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "schedule": list(self.schedule),
            "use_visibility": self.use_visibility,
            "use_zorder": self.use_zorder,
        }


def init_depths(annot: Annotation2D, frame: DepthFrame, skeleton: Skeleton,
                cfg: RefInitConfig = None) -> Pose3D:
    """Initial 3D guess: backproject each click at the sensor depth plus
    an offset into the hand volume (epsilon/2 for visible joints, epsilon
    for hidden ones, so the depth-window constraints start satisfied).
    Missing depth falls back to the parent's initialized z; the root
    falls back to the frame's median valid depth."""
    cfg = cfg or RefInitConfig()
    k = skeleton.joint_count
    if annot.joint_count != k:
        raise GeometryError("annotation joint count does not match skeleton")
    if not np.any(frame.valid_mask):
        raise GeometryError(f"frame {frame.index} has no valid depth")
    median = float(np.median(frame.pixels[frame.valid_mask]))

    z = np.zeros(k)
    for j in skeleton.topological_order():
        delta = cfg.epsilon / 2.0 if annot.visible[j] else cfg.epsilon
        d = frame.depth_at(annot.points[j])
        if d > 0:
            z[j] = d + delta
        elif j == 0:
            z[j] = median + delta
        else:
            z[j] = z[skeleton.parent[j]]
    joints = backproject(annot.points, z, frame.intrinsics)
    return Pose3D(annot.frame_index, joints)


def reference_problem(annot: Annotation2D, frame: DepthFrame, skeleton: Skeleton,
                      cfg: RefInitConfig):
    """(ResidualProblem, ConstraintSet) for one reference frame.

    Variables are one 3-vector block per joint. Residuals: reprojection
    of visible joints. Constraints: bone-length equalities; per visible
    joint a depth window D < z < D+epsilon and the z-order sign vs the
    parent; per hidden joint z > D. Window/floor constraints are dropped
    where the sensor has no depth at the click.
    """
    k = skeleton.joint_count
    cam = frame.intrinsics
    problem = ResidualProblem([3] * k)

    def reproj(j):
        target = annot.points[j]

        def fn(x):
            L = x[3 * j:3 * j + 3]
            if L[2] <= 1.0:
                raise GeometryError("joint behind camera")
            return project(L, cam) - target, [projection_jacobian(L, cam)]
        return fn

    for j in range(k):
        if annot.visible[j]:
            problem.add_block(2, [j], reproj(j), f"reproj:{j}")

    cs = ConstraintSet()

    def bone(j, p, d):
        def fn(x):
            a = x[3 * j:3 * j + 3]
            b = x[3 * p:3 * p + 3]
            diff = a - b
            norm = float(np.linalg.norm(diff))
            if norm < 1e-9:
                u = np.array([0.0, 0.0, 1.0])
                norm = 1e-9
            else:
                u = diff / norm
            return np.array([norm - d]), [u[None, :], -u[None, :]]
        return fn

    for j in range(1, k):
        p = skeleton.parent[j]
        cs.equalities.append(ConstraintBlock(
            1, (j, p), bone(j, p, skeleton.bone_lengths[j]), f"bone:{j}"))

    zrow = np.array([[0.0, 0.0, 1.0]])

    def window(j, dlo, eps):
        def fn(x):
            z = x[3 * j + 2]
            return np.array([z - dlo, dlo + eps - z]), [np.vstack([zrow, -zrow])]
        return fn

    def floor(j, dlo):
        def fn(x):
            return np.array([x[3 * j + 2] - dlo]), [zrow]
        return fn

    def order(j, p, sign):
        # sign=+1 when the joint is closer: parent z - joint z > 0
        def fn(x):
            h = sign * (x[3 * p + 2] - x[3 * j + 2])
            return np.array([h]), [-sign * zrow, sign * zrow]
        return fn

    if cfg.use_visibility:
        for j in range(k):
            d = frame.depth_at(annot.points[j])
            if d <= 0:
                continue
            if annot.visible[j]:
                cs.inequalities.append(ConstraintBlock(
                    2, (j,), window(j, d, cfg.epsilon), f"window:{j}"))
            else:
                cs.inequalities.append(ConstraintBlock(
                    1, (j,), floor(j, d), f"floor:{j}"))

    if cfg.use_zorder:
        for j in range(1, k):
            if annot.visible[j] and annot.zorder[j] != ZORDER_NONE:
                p = skeleton.parent[j]
                cs.inequalities.append(ConstraintBlock(
                    1, (j, p), order(j, p, int(annot.zorder[j])), f"zorder:{j}"))

    return problem, cs


def solve_reference_frame(annot: Annotation2D, frame: DepthFrame,
                          skeleton: Skeleton, cfg: RefInitConfig = None):
    """Lift one annotated frame to 3D: (Pose3D, SolveReport)."""
    cfg = cfg or RefInitConfig()
    guess = init_depths(annot, frame, skeleton, cfg)
    problem, cs = reference_problem(annot, frame, skeleton, cfg)
    try:
        report = penalty_solve(problem, cs, guess.joints.ravel(),
                               schedule=cfg.schedule, opts=cfg.solver,
                               violation_tol=1.0)
    except Exception as e:
        raise RefInitError(f"reference frame {annot.frame_index} failed: {e}") from e
    pose = Pose3D(annot.frame_index, report.x.reshape(-1, 3))
    return pose, report


def solve_all_references(annots, frames, skeleton: Skeleton,
                         cfg: RefInitConfig = None):
    """solve_reference_frame over every annotated reference frame.

    frames may be the full sequence (indexed by annotation frame_index)
    or a parallel list. Failures are collected and raised together.
    """
    cfg = cfg or RefInitConfig()
    by_index = {f.index: f for f in frames}
    poses = []
    failures = []
    for annot in annots:
        frame = by_index.get(annot.frame_index)
        if frame is None:
            failures.append((annot.frame_index, "frame not found"))
            continue
        try:
            pose, _ = solve_reference_frame(annot, frame, skeleton, cfg)
            poses.append(pose)
        except RefInitError as e:
            failures.append((annot.frame_index, str(e)))
    if failures:
        raise RefInitError(f"reference solves failed: {failures}")
    return poses
