"""Command-line pipeline driver.

Commands advance a project directory through the pipeline stages in
order; running one before its prerequisite stage errors out and says
which stage is missing. Outputs are stamped with input hashes, so
re-running a completed stage with unchanged inputs is a no-op.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from ..descriptor import (DescriptorConfig, distance_matrix, embed_sequence,
                          load_embeddings, save_embeddings)
from ..geometry import CameraIntrinsics, GeometryError, Pose3D, project
from ..globalopt import GlobalConfig, build_global_problem, correction_loop, \
    flag_corrections, solve_global
from ..nlsolver import SolverError
from ..propagate import PropagateConfig, propagate_all
from ..refinit import Annotation2D, RefInitConfig, RefInitError, \
    solve_reference_frame
from ..refselect import (DEFAULT_ILP_CAP, SelectionResult, equitemporal,
                         greedy_max_coverage, solve_ilp_exact,
                         selection_from_refs)
from ..synth import Oracle, default_hand_model, desk_script, render_sequence
from . import io
from .project import Project, StageError, create_project

DEFAULT_CAMERA = CameraIntrinsics(241.42, 241.42, 160.0, 120.0, 320, 240)


def _fail(msg: str):
    raise click.ClickException(msg)


def _load(project_dir: str) -> Project:
    proj = Project(project_dir)
    if not proj.exists():
        _fail(f"no project at {project_dir}; run 'synth' first")
    return proj


def _selection(proj: Project) -> SelectionResult:
    doc = proj.stage_output("selection.json")
    if doc is None:
        raise StageError("selection.json missing; run 'select' first")
    return SelectionResult.from_dict(doc["selection"])


def _dm(proj: Project, cfg: DescriptorConfig) -> np.ndarray:
    cache = proj.path("dm.npy")
    if os.path.exists(cache):
        dm = np.load(cache)
        if dm.shape == (proj.n_frames, proj.n_frames):
            return dm
    dm = distance_matrix(proj.frames(), cfg)
    np.save(cache, dm)
    return dm


def _oracle(proj: Project) -> Oracle:
    gt_doc = proj.stage_output("gt_poses.json")
    if gt_doc is None:
        raise StageError("project has no ground-truth poses; oracle "
                         "annotation only works on synthetic projects")
    return Oracle(io.poses_from_doc(gt_doc), proj.frames(),
                  default_hand_model())


def _annotations(proj: Project) -> dict:
    doc = proj.stage_output("annotations.json")
    if doc is None:
        raise StageError("annotations.json missing; run 'import-annotations' first")
    return {int(k): Annotation2D.from_dict(v)
            for k, v in doc["frames"].items()}


@click.group()
def main():
    """Semi-automatic 3D hand pose annotation for depth sequences."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--frames", "n_frames", default=300, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out_dir, n_frames, seed):
    """Render the synthetic desk sequence into a new project."""
    model = default_hand_model()
    script = desk_script(n_frames)
    frames, gt = render_sequence(model, script, DEFAULT_CAMERA, seed=seed)
    proj = create_project(out_dir, DEFAULT_CAMERA, model.skeleton, n_frames,
                          seed)
    io.save_frames(proj.path("frames"), frames)
    proj.write_stage_output("gt_poses.json", io.poses_to_doc(gt),
                            proj.input_hash({"seed": seed, "n": n_frames}))
    proj.advance_stage("loaded")
    click.echo(f"rendered {n_frames} frames into {out_dir}")


@main.command()
@click.option("--project", "project_dir", required=True, type=click.Path())
@click.option("--budget", default=0.10, show_default=True,
              help="reference-frame budget as a fraction of N")
@click.option("--rho", default=0.1, show_default=True)
@click.option("--method", type=click.Choice(["greedy", "equitemporal"]),
              default="greedy", show_default=True)
@click.option("--exact", is_flag=True,
              help="solve minimal full-cover exactly (small N only)")
def select(project_dir, budget, rho, method, exact):
    """Pick reference frames from appearance coverage."""
    proj = _load(project_dir)
    proj.require_stage("loaded")
    dcfg = DescriptorConfig()
    dm = _dm(proj, dcfg)
    ih = proj.input_hash({"budget": budget, "rho": rho, "method": method,
                          "exact": exact, "descriptor": dcfg.to_dict()})
    if proj.stage_is_current("selection.json", ih):
        proj.advance_stage("selected")
        click.echo("selection up to date")
        return
    if exact:
        if proj.n_frames > DEFAULT_ILP_CAP:
            _fail(f"--exact supports at most {DEFAULT_ILP_CAP} frames")
        sel = solve_ilp_exact(dm, rho)
    elif method == "greedy":
        m = max(1, int(round(budget * proj.n_frames)))
        sel = greedy_max_coverage(dm, rho, m)
    else:
        m = max(1, int(round(budget * proj.n_frames)))
        sel = equitemporal(proj.n_frames, m, dm=dm, rho=rho)
    proj.write_stage_output("selection.json", {"selection": sel.to_dict()}, ih)
    proj.advance_stage("selected")
    click.echo(f"selected {len(sel.references)} references "
               f"covering {sel.coverage}/{proj.n_frames} frames")


@main.command("import-annotations")
@click.option("--project", "project_dir", required=True, type=click.Path())
@click.option("--oracle", "use_oracle", is_flag=True,
              help="annotate references from synthetic ground truth")
@click.option("--noise-sigma", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--file", "file_", type=click.Path(exists=True),
              help="annotation document to import instead")
def import_annotations(project_dir, use_oracle, noise_sigma, seed, file_):
    """Store 2D annotations for the reference frames."""
    proj = _load(project_dir)
    proj.require_stage("selected")
    sel = _selection(proj)
    if use_oracle:
        oracle = _oracle(proj)
        annots = {r: oracle.annotate(r, noise_sigma=noise_sigma, seed=seed)
                  for r in sel.references}
        ih = proj.input_hash({"oracle": True, "sigma": noise_sigma,
                              "seed": seed, "refs": sorted(sel.references)})
    elif file_:
        doc = io.read_json(file_)
        annots = {int(k): Annotation2D.from_dict(v)
                  for k, v in doc["frames"].items()}
        missing = [r for r in sel.references if r not in annots]
        if missing:
            _fail(f"imported document lacks annotations for references {missing}")
        ih = proj.input_hash(doc)
    else:
        _fail("pass --oracle or --file")
    for a in annots.values():
        a.check_bounds(proj.camera)
    doc = {"frames": {str(k): v.to_dict() for k, v in annots.items()}}
    proj.write_stage_output("annotations.json", doc, ih)
    effort = proj.effort
    k = proj.skeleton.joint_count
    for r in annots:
        effort.record("click", k, frame=r)
        effort.record("frame", 1, frame=r)
    proj.save_effort(effort)
    proj.advance_stage("annotated")
    click.echo(f"stored annotations for {len(annots)} reference frames")


@main.command("solve-refs")
@click.option("--project", "project_dir", required=True, type=click.Path())
@click.option("--epsilon", default=15.0, show_default=True)
def solve_refs(project_dir, epsilon):
    """Lift reference-frame annotations to 3D poses."""
    proj = _load(project_dir)
    proj.require_stage("annotated")
    annots = _annotations(proj)
    cfg = RefInitConfig(epsilon=epsilon)
    ih = proj.input_hash(proj.stage_output("annotations.json"), cfg.to_dict())
    if proj.stage_is_current("ref_poses.json", ih):
        proj.advance_stage("initialized")
        click.echo("reference poses up to date")
        return
    frames = proj.frames()
    skel = proj.skeleton
    poses, failures = [], []
    for r in sorted(annots):
        try:
            pose, report = solve_reference_frame(annots[r], frames[r], skel, cfg)
            poses.append(pose)
            if report.violation_flagged:
                failures.append((r, f"constraint violation {report.violation:.2f}"))
        except RefInitError as e:
            _fail(f"reference frame {r} failed to solve: {e}")
    doc = io.poses_to_doc(poses)
    if failures:
        doc["warnings"] = [f"frame {r}: {msg}" for r, msg in failures]
    proj.write_stage_output("ref_poses.json", doc, ih)
    proj.advance_stage("initialized")
    click.echo(f"solved {len(poses)} reference frames")


@main.command()
@click.option("--project", "project_dir", required=True, type=click.Path())
def propagate(project_dir):
    """Spread reference poses across the whole sequence."""
    proj = _load(project_dir)
    proj.require_stage("initialized")
    sel = _selection(proj)
    ref_doc = proj.stage_output("ref_poses.json")
    ih = proj.input_hash(ref_doc, proj.stage_output("selection.json"))
    if proj.stage_is_current("poses_propagated.json", ih):
        proj.advance_stage("propagated")
        click.echo("propagation up to date")
        return
    dm = _dm(proj, DescriptorConfig())
    result = propagate_all(proj.frames(), sel.references,
                           io.poses_from_doc(ref_doc), dm, proj.skeleton,
                           PropagateConfig())
    doc = io.poses_to_doc(result.poses)
    doc["aligned_init"] = io.poses_to_doc(
        [result.aligned_init[i] for i in sorted(result.aligned_init)])["frames"]
    doc["sources"] = {str(k): v for k, v in result.sources.items()}
    doc["flags"] = {str(k): list(v) for k, v in result.flags.items()}
    doc["failed"] = list(result.failed)
    proj.write_stage_output("poses_propagated.json", doc, ih)
    proj.advance_stage("propagated")
    click.echo(f"propagated to {proj.n_frames} frames "
               f"({len(result.failed)} frame solves kept their initialization)")


@main.command("global")
@click.option("--project", "project_dir", required=True, type=click.Path())
@click.option("--lambda-m", default=1.0, show_default=True)
@click.option("--lambda-p", default=100.0, show_default=True)
def global_cmd(project_dir, lambda_m, lambda_p):
    """Refine all frames jointly."""
    proj = _load(project_dir)
    proj.require_stage("propagated")
    sel = _selection(proj)
    annots = _annotations(proj)
    prop_doc = proj.stage_output("poses_propagated.json")
    cfg = GlobalConfig(lambda_m=lambda_m, lambda_p=lambda_p)
    ih = proj.input_hash(prop_doc, cfg.to_dict())
    if proj.stage_is_current("poses_global.json", ih):
        proj.advance_stage("globally-solved")
        click.echo("global solve up to date")
        return
    dm = _dm(proj, DescriptorConfig())
    frames = proj.frames()
    poses = io.poses_from_doc(prop_doc)
    problem, cs = build_global_problem(frames, sel.references, annots, dm,
                                       proj.skeleton, cfg)
    refined, report = solve_global(problem, cs, poses, frames, proj.skeleton, cfg)
    doc = io.poses_to_doc(refined)
    doc["solver"] = report.to_dict()
    proj.write_stage_output("poses_global.json", doc, ih)
    with open(proj.path("poses_global.txt"), "w") as f:
        f.write(io.pose_table_text(refined))
    proj.advance_stage("globally-solved")
    click.echo(f"global solve finished ({report.termination}, "
               f"{report.iterations} iterations)")


@main.command()
@click.option("--project", "project_dir", required=True, type=click.Path())
@click.option("--oracle", "use_oracle", is_flag=True,
              help="answer the queue from synthetic ground truth")
@click.option("--threshold", default=5.0, show_default=True)
@click.option("--max-rounds", default=25, show_default=True)
def corrections(project_dir, use_oracle, threshold, max_rounds):
    """Run the flag-correct-resolve loop until the queue drains."""
    proj = _load(project_dir)
    proj.require_stage("globally-solved")
    if not use_oracle:
        _fail("only --oracle corrections are available from the CLI; "
              "interactive corrections go through 'serve'")
    sel = _selection(proj)
    annots = _annotations(proj)
    oracle = _oracle(proj)
    frames = proj.frames()
    cfg = GlobalConfig(correction_threshold=threshold)
    poses = io.poses_from_doc(proj.stage_output("poses_global.json"))
    truth_uv = {i: oracle.truth_projections(i) for i in range(proj.n_frames)}
    state = {
        "frames": frames, "references": sel.references,
        "annotations": annots, "dm": _dm(proj, DescriptorConfig()),
        "skeleton": proj.skeleton, "poses": poses, "corrections": [],
        "truth_uv": truth_uv,
    }
    final, rounds = correction_loop(state, cfg, max_rounds=max_rounds)
    doc = io.poses_to_doc(final)
    doc["rounds"] = rounds
    doc["corrections"] = [
        {"frame_index": f, "joint": j, "uv": [u, v]}
        for (f, j, (u, v)) in state["corrections"]]
    proj.write_stage_output(
        "poses_global.json", doc,
        proj.input_hash({"corrections": len(state["corrections"])}))
    effort = proj.effort
    if state["corrections"]:
        effort.record("correction", len(state["corrections"]))
    proj.save_effort(effort)
    queue = flag_corrections(final, frames, truth_uv, cfg)
    click.echo(f"correction loop: rounds {rounds}, "
               f"{len(state['corrections'])} corrections, "
               f"{len(queue)} still open")


@main.command("eval")
@click.option("--project", "project_dir", required=True, type=click.Path())
def eval_cmd(project_dir):
    """Write accuracy reports against the synthetic ground truth."""
    from .. import evalharness as ev
    proj = _load(project_dir)
    proj.require_stage("globally-solved")
    sel = _selection(proj)
    gt = io.poses_from_doc(proj.stage_output("gt_poses.json"))
    prop_doc = proj.stage_output("poses_propagated.json")
    prop = io.poses_from_doc(prop_doc)
    final = io.poses_from_doc(proj.stage_output("poses_global.json"))
    refset = set(sel.references)
    nonref = [i for i in range(proj.n_frames) if i not in refset]
    aligned = {f["frame_index"]: p for f, p in zip(
        prop_doc["aligned_init"], io.poses_from_doc(
            {"frames": prop_doc["aligned_init"]}))}
    copy_poses = {i: gt[sel.assignment[i]] for i in nonref}
    stages = {
        "closest-reference": copy_poses,
        "aligned": aligned,
        "frame-opt": prop,
        "global": final,
    }
    report = ev.run_stage_table(stages, gt, nonref)
    out = proj.path("reports", "stages.txt")
    with open(out, "w") as f:
        f.write(report["table"] + "\n")
    curves = ev.selection_comparison(_dm(proj, DescriptorConfig()), gt,
                                     float(sel.rho), len(sel.references))
    io.write_json(proj.path("reports", "coverage.json"),
                  {k: v.to_dict() for k, v in curves["curves"].items()})
    click.echo(report["table"])
    click.echo(f"reports written under {proj.path('reports')}")


@main.command()
@click.option("--project", "project_dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8311, show_default=True)
def serve(project_dir, host, port):
    """Serve the annotation UI and JSON API."""
    import uvicorn
    from .service import build_app
    proj = _load(project_dir)
    app = build_app(proj)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
