"""Sequence-wide pose refinement and the correction loop.

All N frames are solved jointly: appearance of every propagated frame
against its closest reference, a zero-order temporal smoothness term
between consecutive frames, and heavily weighted reprojection terms
tying reference frames (and any later corrections) to their 2D
annotations, with bone lengths as penalized equalities. The sparsity is
block-tridiagonal in the frame index, which the sparse LM path exploits.

Variables are per-joint (u, v, z) like the per-frame solve; appearance
and reprojection terms touch only (u, v), smoothness and bones run
through the backprojection. See frame_problem for why.

After a solve, joints whose reprojection strays more than a few pixels
from the truth source are queued for re-annotation; corrections enter
the problem as additional annotation terms and the sequence is solved
again. Corrections never overwrite poses directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (DepthFrame, GeometryError, Pose3D, Skeleton,
                       backproject, backprojection_jacobian, project)
from .nlsolver import (ConstraintBlock, ConstraintSet, DEFAULT_SCHEDULE,
                       ResidualProblem, SolveReport, SolverError,
                       SolverOptions, penalty_solve)
from .propagate import (PatchConfig, bone_between, ds_patch_fd, pose_to_uvz,
                        uvz_to_pose)


@dataclass(frozen=True)
class GlobalConfig:
    lambda_m: float = 1.0
    lambda_p: float = 100.0
    patch: PatchConfig = field(default_factory=PatchConfig)
    schedule: tuple = DEFAULT_SCHEDULE
    correction_threshold: float = 5.0
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iter=25))

    def __post_init__(self):
        # reprojection terms must outweigh smoothness or the annotations
        # stop anchoring the sequence
        if not self.lambda_p > self.lambda_m:
            raise GeometryError("lambda_p must exceed lambda_m")
        if self.correction_threshold <= 0:
            raise GeometryError("correction threshold must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda_m": self.lambda_m,
            "lambda_p": self.lambda_p,
            "patch": self.patch.to_dict(),
            "schedule": list(self.schedule),
            "correction_threshold": self.correction_threshold,
        }


@dataclass
class CorrectionItem:
    frame_index: int
    joint: int
    reprojection: tuple          # current (u, v)
    deviation: float             # px, > threshold while open
    status: str = "open"         # open | corrected
    corrected_uv: tuple = None

    def to_dict(self) -> dict:
        d = {
            "frame_index": self.frame_index,
            "joint": self.joint,
            "reprojection": [float(self.reprojection[0]), float(self.reprojection[1])],
            "deviation": float(self.deviation),
            "status": self.status,
        }
        if self.corrected_uv is not None:
            d["corrected_uv"] = [float(self.corrected_uv[0]), float(self.corrected_uv[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionItem":
        return cls(int(d["frame_index"]), int(d["joint"]),
                   tuple(d["reprojection"]), float(d["deviation"]),
                   d.get("status", "open"),
                   tuple(d["corrected_uv"]) if d.get("corrected_uv") else None)


def closest_references(dm, references) -> np.ndarray:
    """For every frame, the reference with smallest descriptor distance
    (lowest index on ties). Appearance terms compare against this frame,
    which need not be the propagation source."""
    dm = np.asarray(dm)
    refs = np.asarray(sorted(references), dtype=np.int64)
    sub = dm[:, refs]
    return refs[np.argmin(sub, axis=1)]


def build_global_problem(frames, references, annotations, dm,
                         skeleton: Skeleton, cfg: GlobalConfig = None,
                         corrections=None):
    """(ResidualProblem, ConstraintSet) over all 3KN pose coordinates.

    annotations: per reference frame, its 2D annotation (points + visible).
    corrections: optional list of (frame, joint, (u, v)) sparse extra
    annotations, weighted like reference reprojections.
    """
    cfg = cfg or GlobalConfig()
    n = len(frames)
    k = skeleton.joint_count
    refset = set(references)
    if not refset:
        raise GeometryError("at least one reference frame required")
    for r in references:
        if r not in annotations:
            raise GeometryError(f"reference frame {r} has no annotation")

    nearest = closest_references(dm, references)
    problem = ResidualProblem([3 * k] * n)
    sqrt_m = float(np.sqrt(cfg.lambda_m))
    sqrt_p = float(np.sqrt(cfg.lambda_p))

    def appearance(i, j, ref):
        target, source = frames[i], frames[ref]
        annot = annotations[ref]
        o = 3 * k * i + 3 * j

        def fn(x):
            q = x[o:o + 3]
            if q[2] <= 1.0:
                raise GeometryError("joint behind camera")
            d, grad = ds_patch_fd(target, (q[0], q[1]), source,
                                  annot.points[j], cfg.patch)
            jac = np.zeros((1, 3 * k))
            jac[0, 3 * j:3 * j + 2] = grad
            return np.array([d]), [jac]
        return fn

    for i in range(n):
        if i in refset:
            continue
        ref = int(nearest[i])
        for j in range(k):
            problem.add_block(1, [i], appearance(i, j, ref), f"C:{i}:{j}")

    def smooth(i, j, cam_a, cam_b):
        oa = 3 * k * i + 3 * j
        ob = 3 * k * (i + 1) + 3 * j

        def fn(x):
            qa = x[oa:oa + 3]
            qb = x[ob:ob + 3]
            r = sqrt_m * (backproject(qa[:2], qa[2], cam_a)
                          - backproject(qb[:2], qb[2], cam_b))
            ja = np.zeros((3, 3 * k))
            jb = np.zeros((3, 3 * k))
            ja[:, 3 * j:3 * j + 3] = sqrt_m * backprojection_jacobian(
                qa[:2], qa[2], cam_a)
            jb[:, 3 * j:3 * j + 3] = -sqrt_m * backprojection_jacobian(
                qb[:2], qb[2], cam_b)
            return r, [ja, jb]
        return fn

    for i in range(n - 1):
        for j in range(k):
            problem.add_block(3, [i, i + 1],
                              smooth(i, j, frames[i].intrinsics,
                                     frames[i + 1].intrinsics), f"TC:{i}:{j}")

    def reproj(i, j, uv):
        target = np.asarray(uv, dtype=np.float64)
        o = 3 * k * i + 3 * j
        jac = np.zeros((2, 3 * k))
        jac[0, 3 * j] = sqrt_p
        jac[1, 3 * j + 1] = sqrt_p

        def fn(x):
            # linear in the pixel parameterization
            r = sqrt_p * (x[o:o + 2] - target)
            return r, [jac]
        return fn

    for r in sorted(refset):
        annot = annotations[r]
        for j in range(k):
            if annot.visible[j]:
                problem.add_block(2, [r], reproj(r, j, annot.points[j]),
                                  f"P:{r}:{j}")

    for (fi, j, uv) in (corrections or []):
        problem.add_block(2, [fi], reproj(int(fi), int(j), uv),
                          f"Pcorr:{fi}:{j}")

    cs = ConstraintSet()

    def bone(i, j, p, d):
        cam = frames[i].intrinsics
        oj = 3 * k * i + 3 * j
        op = 3 * k * i + 3 * p

        def fn(x):
            r, jj, jp = bone_between(x[oj:oj + 3], x[op:op + 3], d, cam)
            jac = np.zeros((1, 3 * k))
            jac[:, 3 * j:3 * j + 3] = jj
            jac[:, 3 * p:3 * p + 3] = jp
            return np.array(r), [jac]
        return fn

    for i in range(n):
        for j in range(1, k):
            cs.equalities.append(ConstraintBlock(
                1, (i,), bone(i, j, skeleton.parent[j], skeleton.bone_lengths[j]),
                f"bone:{i}:{j}"))
    return problem, cs


def solve_global(problem, constraints, poses, frames, skeleton: Skeleton,
                 cfg: GlobalConfig = None):
    """Sparse LM over the whole sequence: ([Pose3D], SolveReport).

    frames supply the intrinsics for the (u, v, z) <-> camera-space
    conversion. Solver failure returns the initialization with a warning
    instead of raising; the correction loop can still proceed.
    """
    cfg = cfg or GlobalConfig()
    k = skeleton.joint_count
    x0 = np.concatenate([pose_to_uvz(p.joints, f.intrinsics)
                         for p, f in zip(poses, frames)])
    try:
        report = penalty_solve(problem, constraints, x0,
                               schedule=cfg.schedule, opts=cfg.solver,
                               sparse=True, violation_tol=1.0)
        x = report.x
    except SolverError as e:
        warnings.warn(f"global solve failed: {e}")
        report = SolveReport(x0, np.inf, 0, "failed",
                             violation=np.inf, violation_flagged=True)
        x = x0
    out = [Pose3D(poses[i].frame_index,
                  uvz_to_pose(x[3 * k * i:3 * k * (i + 1)], frames[i].intrinsics))
           for i in range(len(poses))]
    return out, report


def flag_corrections(poses, frames, truth_uv, cfg: GlobalConfig = None):
    """Correction queue: every (frame, joint) whose reprojection deviates
    from the truth source by more than the threshold, worst first.

    truth_uv: per frame, (K, 2) true 2D locations (oracle projections on
    synthetic data; confirmed clicks on real data).
    """
    cfg = cfg or GlobalConfig()
    items = []
    for i, pose in enumerate(poses):
        uv = project(pose.joints, frames[i].intrinsics)
        dev = np.linalg.norm(uv - truth_uv[i], axis=1)
        for j in np.flatnonzero(dev > cfg.correction_threshold):
            items.append(CorrectionItem(i, int(j), (uv[j, 0], uv[j, 1]),
                                        float(dev[j])))
    items.sort(key=lambda it: -it.deviation)
    return items


def apply_corrections_and_resolve(items, corrected_uv, state, cfg: GlobalConfig = None):
    """Fold corrected 2D locations into the global problem and re-solve.

    items: open CorrectionItems being answered; corrected_uv: their new
    (u, v) locations, same order. state: dict with frames, references,
    annotations, dm, skeleton, poses, corrections (accumulated list).
    Returns (poses, report, new queue); state is updated in place.
    """
    cfg = cfg or GlobalConfig()
    for it, uv in zip(items, corrected_uv):
        state["corrections"].append((it.frame_index, it.joint,
                                     (float(uv[0]), float(uv[1]))))
        it.status = "corrected"
        it.corrected_uv = (float(uv[0]), float(uv[1]))
    problem, cs = build_global_problem(
        state["frames"], state["references"], state["annotations"],
        state["dm"], state["skeleton"], cfg, corrections=state["corrections"])
    poses, report = solve_global(problem, cs, state["poses"],
                                 state["frames"], state["skeleton"], cfg)
    state["poses"] = poses
    queue = flag_corrections(poses, state["frames"], state["truth_uv"], cfg)
    return poses, report, queue


def correction_loop(state, cfg: GlobalConfig = None, max_rounds: int = 25,
                    per_round: int = None):
    """Drive flag -> correct -> re-solve until the queue drains.

    The truth source answers every open item with its true 2D location
    (per_round caps how many are answered per round; default all).
    Returns (poses, rounds) where rounds is a list of queue lengths
    observed before each re-solve.
    """
    cfg = cfg or GlobalConfig()
    queue = flag_corrections(state["poses"], state["frames"],
                             state["truth_uv"], cfg)
    rounds = []
    for _ in range(max_rounds):
        if not queue:
            break
        rounds.append(len(queue))
        batch = queue if per_round is None else queue[:per_round]
        answers = [state["truth_uv"][it.frame_index][it.joint] for it in batch]
        _, _, queue = apply_corrections_and_resolve(batch, answers, state, cfg)
    return state["poses"], rounds
