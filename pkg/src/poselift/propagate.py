"""Pose propagation from solved frames to the rest of the sequence.

Each step takes the globally closest (uninitialized, initialized) frame
pair by descriptor distance, aligns the pair with masked NCC (one global
integer shift plus a small per-joint refinement), transfers the source
joints, backprojects them at the target's depth, and polishes the frame
by minimizing patch dissimilarities against the source under bone
constraints. The solved frame's reprojections then act as its
annotations for later transfers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from . import kernels
from .geometry import (DepthFrame, GeometryError, Pose3D, Skeleton,
                       backproject, backprojection_jacobian, project)
from .nlsolver import (ConstraintBlock, ConstraintSet, DEFAULT_SCHEDULE,
                       ResidualProblem, SolverOptions, penalty_solve)


@dataclass(frozen=True)
class PatchConfig:
    """Masked-NCC patch dissimilarity: ds = 1 - NCC in [0, 2].

    The overlap requirement is relative: a comparison counts only if the
    shared valid region covers min_valid_fraction of the smaller patch's
    own valid pixels (with an absolute floor). A fixed fraction of the
    full window would blank out fingertips, whose patches are mostly
    background to begin with.
    """

    size: int = 25
    min_valid_fraction: float = 0.25
    min_valid_floor: int = 25

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise GeometryError("patch size must be odd and >= 3")
        if not 0 < self.min_valid_fraction <= 1:
            raise GeometryError("min_valid_fraction must be in (0, 1]")
        if self.min_valid_floor < 1:
            raise GeometryError("min_valid_floor must be >= 1")

    @property
    def half(self) -> int:
        return self.size // 2

    def to_dict(self) -> dict:
        return {"size": self.size,
                "min_valid_fraction": self.min_valid_fraction,
                "min_valid_floor": self.min_valid_floor}


@dataclass(frozen=True)
class PropagateConfig:
    patch: PatchConfig = field(default_factory=PatchConfig)
    max_global_shift: int = 24
    max_joint_shift: int = 6
    # depth pixels measure the front surface; joint centers sit inside
    # the finger volume, same convention as the reference-frame init.
    # Scalar, or one inset per joint: the wrist and finger bases sit
    # roughly twice as deep under the surface as fingertips, and the
    # appearance solve cannot recover depth that the initialization got
    # wrong, so a thickness profile pays off when one is known.
    volume_inset_mm: float | tuple = 7.5
    # a depth read that disagrees with the source joint's depth by more
    # than this much likely hit an occluder in front of the joint (or
    # background through a gap); the source depth is the better guess
    depth_jump_mm: float = 15.0
    # weak per-joint pull of z toward the initialization's sensor depth
    # during the appearance solve; see frame_problem
    depth_anchor_weight: float = 0.005
    schedule: tuple = DEFAULT_SCHEDULE
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iter=40))


@dataclass(frozen=True)
class AlignmentField:
    """2D offsets mapping source-frame pixels to target-frame pixels:
    total offset of joint k is global_shift + joint_shift[k]."""

    global_shift: np.ndarray       # (2,) int, (dx, dy)
    joint_shifts: np.ndarray       # (K, 2) int
    global_ncc: float

    def offsets(self) -> np.ndarray:
        return self.global_shift[None, :] + self.joint_shifts


def ds_patch(frame1: DepthFrame, uv1, frame2: DepthFrame, uv2,
             patch: PatchConfig):
    """(ds, gradient w.r.t. uv1) of the masked-NCC patch dissimilarity.

    The gradient is the analytic derivative of the bilinear samples with
    the valid mask held fixed."""
    d, du, dv = kernels.patch_ds(
        frame1.pixels, frame1.valid_u8, float(uv1[0]), float(uv1[1]),
        frame2.pixels, frame2.valid_u8, float(uv2[0]), float(uv2[1]),
        patch.half, patch.min_valid_fraction, patch.min_valid_floor)
    return d, np.array([du, dv])


FD_STEP_PX = 0.5


def ds_patch_fd(frame1: DepthFrame, uv1, frame2: DepthFrame, uv2,
                patch: PatchConfig):
    """(ds, gradient w.r.t. uv1) with a central-difference gradient.

    The analytic bilinear gradient differentiates the samples with the
    validity weights held fixed, so it understates slopes across
    silhouettes, where most of the signal for fingertips lives; a
    half-pixel secant measures them. Central rather than one-sided
    because ds is V-shaped around the matching position: within half a
    pixel of the vertex a forward secant straddles it and its sign is
    noise, which reliably stalls the pose solvers a couple of pixels
    short. The central secant keeps the correct sign on the whole V and
    linearizes the vertex."""
    d0, _ = ds_patch(frame1, uv1, frame2, uv2, patch)
    dup, _ = ds_patch(frame1, (uv1[0] + FD_STEP_PX, uv1[1]), frame2, uv2, patch)
    dum, _ = ds_patch(frame1, (uv1[0] - FD_STEP_PX, uv1[1]), frame2, uv2, patch)
    dvp, _ = ds_patch(frame1, (uv1[0], uv1[1] + FD_STEP_PX), frame2, uv2, patch)
    dvm, _ = ds_patch(frame1, (uv1[0], uv1[1] - FD_STEP_PX), frame2, uv2, patch)
    return d0, np.array([dup - dum, dvp - dvm]) / (2.0 * FD_STEP_PX)


def select_next_pair(initialized, dm) -> tuple:
    """Globally closest (uninitialized c, initialized a) pair; ties break
    on lowest c then lowest a."""
    dm = np.asarray(dm)
    n = dm.shape[0]
    init = sorted(initialized)
    if not init or len(init) == n:
        raise GeometryError("need a nonempty proper subset of initialized frames")
    rest = [i for i in range(n) if i not in set(init)]
    sub = dm[np.ix_(rest, init)]
    flat = int(np.argmin(sub))  # row-major: lowest c first, then lowest a
    c = rest[flat // len(init)]
    a = init[flat % len(init)]
    return c, a


def _masked_global_shift(target: DepthFrame, source: DepthFrame,
                         max_shift: int, min_fraction: float = 0.25):
    """Integer (dx, dy) maximizing masked NCC of target against source
    shifted by it. Row-major first maximum on ties."""
    f1 = np.where(target.valid_mask, target.pixels, 0.0)
    m1 = target.valid_mask.astype(np.float64)
    f2 = np.where(source.valid_mask, source.pixels, 0.0)
    m2 = source.valid_mask.astype(np.float64)

    def xcorr(a, b):
        return fftconvolve(a, b[::-1, ::-1], mode="full")

    n = xcorr(m1, m2)
    s1 = xcorr(f1, m2)
    s2 = xcorr(m1, f2)
    s11 = xcorr(f1 * f1, m2)
    s22 = xcorr(m1, f2 * f2)
    s12 = xcorr(f1, f2)

    h, w = f1.shape
    cy, cx = h - 1, w - 1
    sl = (slice(cy - max_shift, cy + max_shift + 1),
          slice(cx - max_shift, cx + max_shift + 1))
    n = np.maximum(n[sl], 0.0)
    need = min_fraction * min(m1.sum(), m2.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        mu1 = s1[sl] / n
        mu2 = s2[sl] / n
        var1 = s11[sl] - n * mu1 * mu1
        var2 = s22[sl] - n * mu2 * mu2
        cov = s12[sl] - n * mu1 * mu2
        ncc = cov / np.sqrt(var1 * var2)
    ok = (n >= max(need, 1.0)) & (var1 > 1e-9) & (var2 > 1e-9) & np.isfinite(ncc)
    if not ok.any():
        return None
    ncc = np.where(ok, ncc, -np.inf)
    best = int(np.argmax(ncc))
    dy = best // ncc.shape[1] - max_shift
    dx = best % ncc.shape[1] - max_shift
    return np.array([dx, dy], dtype=np.int64), float(ncc.ravel()[best])


def align_frames(target: DepthFrame, source: DepthFrame, source_joints_2d,
                 cfg: PropagateConfig = None) -> AlignmentField:
    """Alignment field mapping source-frame joint pixels into the target.

    Global translation from full-image masked NCC over integer shifts,
    then an NCC refinement of each joint's patch within a small window.
    No overlapping valid pixels yields a zero field with a warning.
    """
    cfg = cfg or PropagateConfig()
    la = np.asarray(source_joints_2d, dtype=np.float64)
    k = la.shape[0]

    got = _masked_global_shift(target, source, cfg.max_global_shift,
                               cfg.patch.min_valid_fraction)
    if got is None:
        warnings.warn("frames share no valid overlap; using a zero alignment")
        return AlignmentField(np.zeros(2, dtype=np.int64),
                              np.zeros((k, 2), dtype=np.int64), -2.0)
    gshift, gncc = got

    shifts = np.zeros((k, 2), dtype=np.int64)
    for j in range(k):
        cx_m = int(np.rint(la[j, 0]))
        cy_m = int(np.rint(la[j, 1]))
        dx, dy, ncc = kernels.refine_shift(
            target.pixels, target.valid_u8,
            cx_m + int(gshift[0]), cy_m + int(gshift[1]),
            source.pixels, source.valid_u8, cx_m, cy_m,
            cfg.patch.half, cfg.max_joint_shift,
            cfg.patch.min_valid_fraction, cfg.patch.min_valid_floor)
        if ncc > -2.0:
            shifts[j] = (dx, dy)
    return AlignmentField(gshift, shifts, gncc)


def transfer_and_backproject(source_joints_2d, alignment: AlignmentField,
                             target: DepthFrame, source_pose: Pose3D,
                             volume_inset_mm=7.5, depth_jump_mm=15.0):
    """Initial 3D guess for the target frame: move each source joint by
    its alignment offset, read the target depth there, and backproject
    inside the surface by volume_inset_mm (scalar or per joint). The
    source joint's depth substitutes when the read is missing, or when
    it jumps more than depth_jump_mm away from the source depth: a jump
    that large means the pixel sees an occluding finger or background
    through a gap rather than the joint itself, and backprojecting it
    would plant the joint tens of mm off (bone penalties then drag its
    neighbors along). Joints pushed outside the image are clamped and
    flagged."""
    cam = target.intrinsics
    la = np.asarray(source_joints_2d, dtype=np.float64)
    pts = la + alignment.offsets()
    k = pts.shape[0]
    inset = np.broadcast_to(np.asarray(volume_inset_mm, dtype=np.float64), (k,))
    flagged = []
    joints = np.zeros((k, 3))
    for j in range(k):
        x, y = pts[j]
        cx = min(max(x, 0.0), cam.width - 1.0)
        cy = min(max(y, 0.0), cam.height - 1.0)
        if cx != x or cy != y:
            flagged.append(j)
        d = target.depth_at((cx, cy))
        z_src = source_pose.joints[j, 2]
        if d > 0 and abs(d + inset[j] - z_src) <= depth_jump_mm:
            d = d + inset[j]
        else:
            d = z_src
        joints[j] = backproject((cx, cy), d, cam)
    return Pose3D(target.index, joints), tuple(flagged)


def bone_between(qj, qp, rest_length, cam):
    """Length residual and (u, v, z) Jacobians for one bone.

    qj, qp: the two joints' (u, v, z) coordinates. Returns
    (residual (1,), jac_j (1, 3), jac_p (1, 3)); the chain rule runs
    through the backprojection so the residual is the camera-space bone
    length error in mm."""
    pj = backproject(qj[:2], qj[2], cam)
    pp = backproject(qp[:2], qp[2], cam)
    diff = pj - pp
    norm = float(np.linalg.norm(diff))
    if norm < 1e-9:
        u = np.array([0.0, 0.0, 1.0])
        norm = 1e-9
    else:
        u = diff / norm
    jj = (u @ backprojection_jacobian(qj[:2], qj[2], cam))[None, :]
    jp = (-u @ backprojection_jacobian(qp[:2], qp[2], cam))[None, :]
    return np.array([norm - rest_length]), jj, jp


def frame_problem(target: DepthFrame, source: DepthFrame, source_joints_2d,
                  skeleton: Skeleton, patch: PatchConfig,
                  anchor_z=None, anchor_weight=0.0):
    """Appearance objective for one frame: per joint the patch around its
    reprojection in the target is compared against the patch at the
    source's annotation; bones are equality constraints.

    Variables are (u, v, z) per joint, the reprojection pixel plus
    depth, rather than camera-space (x, y, z). Same minimum, better
    geometry for the solver: the dissimilarity depends on (u, v) only,
    so its Jacobian has exact zeros in the depth column. In Cartesian
    coordinates depth leaks into the appearance term through the
    perspective division, making depth the one direction a bone
    correction can take at almost no appearance cost; the penalty
    stages then drain every mm of bone violation into z, where nothing
    opposes them (measured: z error 0.4mm -> 2-5mm while 2D improved).
    With the pixel parameterization the appearance term is exactly
    indifferent to z, and bones spend z only as their own geometry
    warrants.

    anchor_z (optional, with anchor_weight > 0) adds one residual
    anchor_weight * (z_j - anchor_z[j]) per joint. The initialization's
    depths come from the sensor, accurate to ~1mm where the surface is
    visible; the appearance term cannot see z at all, so without an
    anchor a bone-length repair is free to spend several measured-good
    millimeters of depth instead of half a pixel of contested (u, v).
    The weight is small: it selects among bone-feasible repairs, it does
    not fight the penalties (mm-scale violations cost 1e4 times more at
    the last penalty stage)."""
    k = skeleton.joint_count
    cam = target.intrinsics
    la = np.asarray(source_joints_2d, dtype=np.float64)
    problem = ResidualProblem([3] * k)

    def appearance(j):
        def fn(x):
            q = x[3 * j:3 * j + 3]
            if q[2] <= 1.0:
                raise GeometryError("joint behind camera")
            d, grad = ds_patch_fd(target, (q[0], q[1]), source, la[j], patch)
            return np.array([d]), [np.array([[grad[0], grad[1], 0.0]])]
        return fn

    for j in range(k):
        problem.add_block(1, [j], appearance(j), f"ds:{j}")

    if anchor_z is not None and anchor_weight > 0:
        az = np.asarray(anchor_z, dtype=np.float64)
        w = float(anchor_weight)
        jaz = np.array([[0.0, 0.0, w]])

        def anchor(j):
            def fn(x):
                return np.array([w * (x[3 * j + 2] - az[j])]), [jaz]
            return fn

        for j in range(k):
            problem.add_block(1, [j], anchor(j), f"z:{j}")

    cs = ConstraintSet()

    def bone(j, p, d):
        def fn(x):
            r, jj, jp = bone_between(x[3 * j:3 * j + 3], x[3 * p:3 * p + 3],
                                     d, cam)
            return r, [jj, jp]
        return fn

    for j in range(1, k):
        p = skeleton.parent[j]
        cs.equalities.append(ConstraintBlock(
            1, (j, p), bone(j, p, skeleton.bone_lengths[j]), f"bone:{j}"))
    return problem, cs


def pose_to_uvz(joints, cam):
    """Flatten (K, 3) camera-space joints to the solver's (u, v, z) layout."""
    uv = project(joints, cam)
    return np.column_stack([uv, np.asarray(joints)[:, 2]]).ravel()


def uvz_to_pose(x, cam):
    """(K, 3) camera-space joints from the solver's flat (u, v, z) vector."""
    q = x.reshape(-1, 3)
    return backproject(q[:, :2], q[:, 2], cam)


def _snap_initial(target: DepthFrame, initial_joints, source: DepthFrame,
                  source_uv, cfg: PropagateConfig):
    """Integer NCC re-centering of the initial guess, one joint at a time.

    The patch dissimilarity is only locally convex: from more than a
    couple of pixels out, descent parks in a side minimum short of the
    matching position (measured on identical frames: a 3px offset sticks
    at ~1.4px with a 16x cost barrier between it and the true match). A
    discrete template search has no such basins, so run it first and let
    the solver do the subpixel part. Joints whose search finds no valid
    overlap keep their guess; depth is carried over unchanged."""
    uv = project(initial_joints, target.intrinsics)
    src = np.asarray(source_uv, dtype=np.float64)
    out = np.array(initial_joints, dtype=np.float64, copy=True)
    for k in range(uv.shape[0]):
        dx, dy, ncc = kernels.refine_shift(
            target.pixels, target.valid_u8,
            int(round(uv[k, 0])), int(round(uv[k, 1])),
            source.pixels, source.valid_u8,
            int(round(src[k, 0])), int(round(src[k, 1])),
            cfg.patch.half, cfg.max_joint_shift,
            cfg.patch.min_valid_fraction, cfg.patch.min_valid_floor)
        if ncc > -1.5 and (dx or dy):
            out[k] = backproject((uv[k, 0] + dx, uv[k, 1] + dy),
                                 float(initial_joints[k][2]),
                                 target.intrinsics)
    return out


def solve_frame(target: DepthFrame, initial: Pose3D, source: DepthFrame,
                source_joints_2d, skeleton: Skeleton,
                cfg: PropagateConfig = None):
    """Polish one frame against its source: (Pose3D, SolveReport).

    The initial guess is integer-snapped per joint by template search
    before the continuous solve (see _snap_initial). Solver trouble
    keeps the initial guess and flags it in the report rather than
    raising."""
    cfg = cfg or PropagateConfig()
    init = _snap_initial(target, initial.joints, source, source_joints_2d, cfg)
    x0 = pose_to_uvz(init, target.intrinsics)
    problem, cs = frame_problem(target, source, source_joints_2d, skeleton,
                                cfg.patch, anchor_z=x0.reshape(-1, 3)[:, 2],
                                anchor_weight=cfg.depth_anchor_weight)
    try:
        report = penalty_solve(problem, cs, x0,
                               schedule=cfg.schedule, opts=cfg.solver,
                               violation_tol=1.0)
        pose = Pose3D(target.index, uvz_to_pose(report.x, target.intrinsics))
        return pose, report
    except Exception as e:  # keep the guess; the global stage may still fix it
        warnings.warn(f"frame {target.index} appearance solve failed: {e}")
        from .nlsolver import SolveReport
        report = SolveReport(x0, np.inf, 0, "failed",
                             violation=np.inf, violation_flagged=True)
        return initial, report


@dataclass
class PropagationResult:
    poses: list                    # Pose3D for every frame
    aligned_init: dict             # frame -> Pose3D before the appearance solve
    sources: dict                  # frame -> the initialized frame it came from
    flags: dict                    # frame -> tuple of flagged joint indices
    failed: tuple                  # frames whose appearance solve failed


def propagate_all(frames, references, ref_poses, dm,
                  skeleton: Skeleton, cfg: PropagateConfig = None,
                  solve: bool = True) -> PropagationResult:
    """Initialize every non-reference frame, closest pairs first.

    solve=False stops each frame at the aligned transfer (no appearance
    solve), chaining through the raw initializations instead; this is the
    alignment-only pipeline used for stage ablation tables."""
    cfg = cfg or PropagateConfig()
    n = len(frames)
    poses = {p.frame_index: p for p in ref_poses}
    missing = [r for r in references if r not in poses]
    if missing:
        raise GeometryError(f"no solved pose for reference frames {missing}")
    annot_2d = {r: project(poses[r].joints, frames[r].intrinsics)
                for r in references}
    initialized = set(references)
    aligned_init = {}
    sources = {}
    flags = {}
    failed = []

    while len(initialized) < n:
        c, a = select_next_pair(initialized, dm)
        field_ = align_frames(frames[c], frames[a], annot_2d[a], cfg)
        guess, flagged = transfer_and_backproject(annot_2d[a], field_,
                                                  frames[c], poses[a],
                                                  cfg.volume_inset_mm,
                                                  cfg.depth_jump_mm)
        aligned_init[c] = guess
        sources[c] = a
        if flagged:
            flags[c] = flagged
        if solve:
            pose, report = solve_frame(frames[c], guess, frames[a],
                                       annot_2d[a], skeleton, cfg)
            if report.termination == "failed":
                failed.append(c)
        else:
            pose = guess
        poses[c] = pose
        annot_2d[c] = project(pose.joints, frames[c].intrinsics)
        initialized.add(c)

    return PropagationResult([poses[i] for i in range(n)], aligned_init,
                             sources, flags, tuple(failed))
