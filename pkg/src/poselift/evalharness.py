"""Experiment drivers: error metrics, reference-coverage curves, and the
tables used to sanity-check the pipeline on synthetic sequences."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .geometry import GeometryError, Pose3D, project
from .refinit import RefInitConfig, solve_reference_frame
from .refselect import SelectionResult, equitemporal, greedy_max_coverage


@dataclass(frozen=True)
class ErrorStats:
    avg: float
    median: float
    max: float
    per_joint: np.ndarray        # (K,) mean error per joint, mm
    frame_count: int

    def to_dict(self) -> dict:
        return {
            "avg": self.avg,
            "median": self.median,
            "max": self.max,
            "per_joint": [float(v) for v in self.per_joint],
            "frame_count": self.frame_count,
        }


@dataclass(frozen=True)
class CoverageCurve:
    taus: np.ndarray             # mm
    values: np.ndarray           # fraction of frames within tau

    def to_dict(self) -> dict:
        return {"taus": [float(t) for t in self.taus],
                "values": [float(v) for v in self.values]}


def config_hash(*configs) -> str:
    """Stable short hash over config dicts, stamped into every report."""
    blob = json.dumps([c.to_dict() if hasattr(c, "to_dict") else c
                       for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def joint_error_stats(est, gt) -> ErrorStats:
    """Euclidean per-joint error aggregated over frames."""
    if len(est) != len(gt):
        raise GeometryError("pose lists differ in length")
    errs = []
    for e, g in zip(est, gt):
        if e.joints.shape != g.joints.shape:
            raise GeometryError("pose joint counts differ")
        errs.append(np.linalg.norm(e.joints - g.joints, axis=1))
    errs = np.asarray(errs)   # (N, K)
    return ErrorStats(float(errs.mean()), float(np.median(errs)),
                      float(errs.max()), errs.mean(axis=0), len(est))


def pose_distance(a: Pose3D, b: Pose3D) -> float:
    """Max over joints of the Euclidean distance (the coverage metric)."""
    return float(np.linalg.norm(a.joints - b.joints, axis=1).max())


DEFAULT_TAUS = np.arange(0.0, 51.0, 1.0)


def n_tau_curve(gt, selection: SelectionResult, taus=None) -> CoverageCurve:
    """Fraction of frames whose assigned reference is within tau of their
    true pose, by the max-joint distance."""
    taus = DEFAULT_TAUS if taus is None else np.asarray(taus, dtype=np.float64)
    dists = np.array([pose_distance(gt[i], gt[selection.assignment[i]])
                      for i in range(len(gt))])
    values = np.array([(dists < t).mean() for t in taus])
    return CoverageCurve(taus, values)


def mean_reference_distance(gt, selection: SelectionResult) -> float:
    return float(np.mean([pose_distance(gt[i], gt[selection.assignment[i]])
                          for i in range(len(gt))]))


def text_table(headers, rows, title=None) -> str:
    cols = [len(h) for h in headers]
    srows = [[str(c) for c in r] for r in rows]
    for r in srows:
        cols = [max(c, len(v)) for c, v in zip(cols, r)]
    def line(vals):
        return "  ".join(v.ljust(c) for v, c in zip(vals, cols)).rstrip()
    out = ([title] if title else []) + [line(headers),
                                        line(["-" * c for c in cols])]
    out += [line(r) for r in srows]
    return "\n".join(out)


def run_ablation_table(frames, gt, references, oracle, skeleton,
                       base_cfg: RefInitConfig = None, noise_sigma=3.0,
                       seeds=range(10)) -> dict:
    """Reference-frame initialization under progressively richer 2D
    annotations, plus the same solve under click noise.

    Rows: reprojection-only, +visibility, +visibility+depth-order, then
    the full constraint set with noisy clicks (mean +- std over seeds).
    """
    base_cfg = base_cfg or RefInitConfig()
    gt_ref = [gt[r] for r in references]

    variants = [
        ("2d-only", replace(base_cfg, use_visibility=False, use_zorder=False)),
        ("+visibility", replace(base_cfg, use_visibility=True, use_zorder=False)),
        ("+vis+zorder", replace(base_cfg, use_visibility=True, use_zorder=True)),
    ]
    rows = []
    results = {}
    for name, cfg in variants:
        poses = []
        for r in references:
            annot = oracle.annotate(r, noise_sigma=0.0)
            pose, _ = solve_reference_frame(annot, frames[r], skeleton, cfg)
            poses.append(pose)
        stats = joint_error_stats(poses, gt_ref)
        results[name] = stats
        rows.append([name, "%.2f" % stats.avg, "%.2f" % stats.median,
                     "%.2f" % stats.max])

    noisy_avgs = []
    for seed in seeds:
        poses = []
        for r in references:
            annot = oracle.annotate(r, noise_sigma=noise_sigma, seed=seed)
            pose, _ = solve_reference_frame(annot, frames[r], skeleton,
                                            variants[-1][1])
            poses.append(pose)
        noisy_avgs.append(joint_error_stats(poses, gt_ref).avg)
    noisy_avgs = np.asarray(noisy_avgs)
    results["noisy"] = (float(noisy_avgs.mean()), float(noisy_avgs.std()))
    rows.append(["+noise %.0fpx" % noise_sigma,
                 "%.2f+-%.2f" % (noisy_avgs.mean(), noisy_avgs.std()), "", ""])

    table = text_table(["variant", "avg mm", "median mm", "max mm"], rows,
                       title="reference initialization ablation  [cfg %s]"
                       % config_hash(base_cfg, {"sigma": noise_sigma,
                                                "seeds": list(seeds)}))
    return {"stats": results, "table": table,
            "plot": {"x": [r[0] for r in rows], "y": [r[1] for r in rows]}}


def run_stage_table(stage_poses: dict, gt, nonref_indices,
                    configs=()) -> dict:
    """Average error of each pipeline stage over non-reference frames.

    stage_poses: ordered mapping stage name -> list of poses for the
    whole sequence (or dict by frame index).
    """
    rows = []
    stats = {}
    idx = list(nonref_indices)
    for name, poses in stage_poses.items():
        byix = poses if isinstance(poses, dict) else {i: poses[i] for i in idx}
        est = [byix[i] for i in idx]
        s = joint_error_stats(est, [gt[i] for i in idx])
        stats[name] = s
        rows.append([name, "%.2f" % s.avg, "%.2f" % s.median, "%.2f" % s.max])
    table = text_table(["stage", "avg mm", "median mm", "max mm"], rows,
                       title="stage accuracy (non-reference frames)  [cfg %s]"
                       % config_hash(*configs))
    return {"stats": stats, "table": table,
            "plot": {"x": [r[0] for r in rows],
                     "y": [float(r[1]) for r in rows]}}


def run_selection_sweep(run_pipeline, n_frames, budgets=(0.03, 0.10, 0.30)) -> dict:
    """Full-pipeline error and oracle-correction effort per reference
    budget. run_pipeline(m) -> (avg_error_mm, correction_count)."""
    rows = []
    series = []
    for b in budgets:
        m = max(1, int(round(b * n_frames)))
        avg, ncorr = run_pipeline(m)
        rows.append(["%d%%" % round(100 * b), str(m), "%.2f" % avg, str(ncorr)])
        series.append((m, avg, ncorr))
    table = text_table(["budget", "|R|", "avg mm", "corrections"], rows,
                       title="accuracy vs reference budget")
    return {"series": series, "table": table,
            "plot": {"x": [s[0] for s in series],
                     "y": [s[1] for s in series],
                     "corrections": [s[2] for s in series]}}


def selection_comparison(dm, gt, rho, m) -> dict:
    """Greedy vs equitemporal reference choice on one sequence: coverage
    curves and mean distance to the assigned reference."""
    greedy = greedy_max_coverage(dm, rho, m)
    equi = equitemporal(len(gt), m, dm=dm, rho=rho)
    curves = {"greedy": n_tau_curve(gt, greedy),
              "equitemporal": n_tau_curve(gt, equi)}
    means = {"greedy": mean_reference_distance(gt, greedy),
             "equitemporal": mean_reference_distance(gt, equi)}
    return {"curves": curves, "means": means,
            "selections": {"greedy": greedy, "equitemporal": equi}}
