"""JSON-over-HTTP service for the annotation UI.

Contract (all payloads JSON unless noted):

  GET  /api/project                     project metadata: stage, frame and
                                        joint counts, joint names, skeleton
                                        (parents, bone lengths), camera,
                                        reference list
  GET  /api/frames                      [{index, is_reference, annotated}]
  GET  /api/frames/{i}/depth.png        raw 16-bit grayscale PNG (mm)
  GET  /api/frames/{i}/view.png?near=&far=  8-bit grayscale for display
  GET  /api/frames/{i}/annotation       stored annotation document
  PUT  /api/frames/{i}/annotation       store one; 400 on malformed or
                                        out-of-bounds, 409 during a solve
  GET  /api/corrections                 the open correction queue
  POST /api/corrections/resolve         {frame, joint, x, y}; queues the
                                        correction and starts a re-solve
  POST /api/solve/{stage}               stage in {select, solve-refs,
                                        propagate, global}; 409 if busy
  GET  /api/solve/status                {running, stage, state, log, error}
  GET  /api/solve/stream                text/event-stream of log lines
  GET  /api/poses/{i}                   {frame, joints, reprojections};
                                        reprojections match the camera
                                        projection of joints exactly
  GET  /api/effort                      annotator effort counters

Errors use HTTP codes: 404 unknown frame/resource, 400 malformed input,
409 when a solve is already running. Mutations are serialized behind one
lock, and everything except the solve itself is rejected while a solve
job runs.
"""

from __future__ import annotations

import io as _io
import json
import threading
import time

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import (HTMLResponse, JSONResponse, Response,
                               StreamingResponse)

from ..descriptor import DescriptorConfig, distance_matrix
from ..geometry import GeometryError, Pose3D, project
from ..globalopt import GlobalConfig, build_global_problem, flag_corrections, \
    solve_global
from ..propagate import PropagateConfig, propagate_all
from ..refinit import Annotation2D, RefInitConfig, RefInitError, \
    solve_reference_frame
from ..refselect import greedy_max_coverage
from . import io
from .project import Project, StageError

SOLVE_STAGES = ("select", "solve-refs", "propagate", "global")


class SolveJob:
    """One background solve at a time; status is polled or streamed."""

    def __init__(self):
        self.lock = threading.Lock()
        self.thread = None
        self.stage = None
        self.state = "idle"        # idle | running | done | failed
        self.log = []
        self.error = None

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "running": self.state == "running",
                "stage": self.stage,
                "state": self.state,
                "log": list(self.log),
                "error": self.error,
            }

    def say(self, line: str) -> None:
        with self.lock:
            self.log.append(line)

    def start(self, stage: str, fn) -> None:
        with self.lock:
            if self.state == "running":
                raise HTTPException(409, "a solve is already running")
            self.stage = stage
            self.state = "running"
            self.log = [f"{stage} started"]
            self.error = None

        def run():
            try:
                fn()
            except Exception as e:
                with self.lock:
                    self.state = "failed"
                    self.error = str(e)
                    self.log.append(f"{stage} failed: {e}")
                return
            with self.lock:
                self.state = "done"
                self.log.append(f"{stage} finished")

        self.thread = threading.Thread(target=run, daemon=True)
        self.thread.start()


def build_app(proj: Project, frontend_dir: str = None) -> FastAPI:
    app = FastAPI(title="hand pose annotator", docs_url=None, redoc_url=None)
    job = SolveJob()
    write_lock = threading.Lock()
    frames = proj.frames()
    cam = proj.camera
    skel = proj.skeleton

    def frame_or_404(i: int):
        if not 0 <= i < proj.n_frames:
            raise HTTPException(404, f"no frame {i}")
        return frames[i]

    def no_solve_running():
        if job.snapshot()["running"]:
            raise HTTPException(409, "a solve is running; try again when it finishes")

    def annotations() -> dict:
        doc = proj.stage_output("annotations.json") or {"frames": {}}
        return doc

    def references() -> list:
        doc = proj.stage_output("selection.json")
        return [] if doc is None else list(doc["selection"]["references"])

    def dm():
        import os
        cache = proj.path("dm.npy")
        if os.path.exists(cache):
            return np.load(cache)
        m = distance_matrix(frames, DescriptorConfig())
        np.save(cache, m)
        return m

    @app.get("/api/project")
    def project_info():
        return {
            "stage": proj.stage,
            "n_frames": proj.n_frames,
            "joint_count": skel.joint_count,
            "joint_names": list(skel.joint_names),
            "skeleton": skel.to_dict(),
            "camera": cam.to_dict(),
            "references": references(),
        }

    @app.get("/api/frames")
    def frame_list():
        annotated = set(int(k) for k in annotations()["frames"])
        refs = set(references())
        return [{"index": i, "is_reference": i in refs,
                 "annotated": i in annotated}
                for i in range(proj.n_frames)]

    @app.get("/api/frames/{i}/depth.png")
    def depth_png(i: int):
        frame_or_404(i)
        with open(proj.path("frames", io.FRAME_PATTERN % i), "rb") as f:
            return Response(f.read(), media_type="image/png")

    @app.get("/api/frames/{i}/view.png")
    def view_png(i: int, near: float = None, far: float = None):
        frame = frame_or_404(i)
        buf = _io.BytesIO()
        io.depth_to_grayscale_png(frame.pixels, near, far).save(buf, "PNG")
        return Response(buf.getvalue(), media_type="image/png")

    @app.get("/api/frames/{i}/annotation")
    def get_annotation(i: int):
        frame_or_404(i)
        doc = annotations()["frames"].get(str(i))
        if doc is None:
            raise HTTPException(404, f"frame {i} has no annotation")
        return doc

    @app.put("/api/frames/{i}/annotation")
    async def put_annotation(i: int, request: Request):
        frame_or_404(i)
        no_solve_running()
        try:
            payload = await request.json()
        except Exception:
            raise HTTPException(400, "body is not valid JSON")
        try:
            annot = Annotation2D.from_dict({"frame": i,
                                            "joints": payload["joints"]})
            if annot.joint_count != skel.joint_count:
                raise GeometryError(
                    f"expected {skel.joint_count} joints, got {annot.joint_count}")
            annot.check_bounds(cam)
        except (GeometryError, KeyError, TypeError, ValueError) as e:
            raise HTTPException(400, f"malformed annotation: {e}")
        with write_lock:
            doc = annotations()
            doc["frames"][str(i)] = annot.to_dict()
            proj.write_stage_output("annotations.json", doc,
                                    proj.input_hash(doc))
            effort = proj.effort
            effort.record("click", skel.joint_count, frame=i)
            effort.record("frame", 1, frame=i)
            proj.save_effort(effort)
            refs = references()
            if refs and all(str(r) in doc["frames"] for r in refs):
                proj.advance_stage("annotated")
        return annot.to_dict()

    @app.get("/api/corrections")
    def corrections():
        doc = proj.stage_output("corrections.json") or {"queue": []}
        return doc["queue"]

    @app.post("/api/corrections/resolve")
    async def resolve_correction(request: Request):
        no_solve_running()
        try:
            payload = await request.json()
            fi = int(payload["frame"])
            joint = int(payload["joint"])
            x = float(payload["x"])
            y = float(payload["y"])
        except Exception:
            raise HTTPException(400, "need numeric frame, joint, x, y")
        frame_or_404(fi)
        if not 0 <= joint < skel.joint_count:
            raise HTTPException(400, f"no joint {joint}")
        if not (0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1):
            raise HTTPException(400, "corrected point outside the image")
        with write_lock:
            doc = proj.stage_output("corrections.json") or {"queue": [],
                                                            "applied": []}
            doc.setdefault("applied", []).append(
                {"frame": fi, "joint": joint, "x": x, "y": y})
            doc["queue"] = [q for q in doc["queue"]
                            if not (q["frame_index"] == fi and q["joint"] == joint)]
            proj.write_stage_output("corrections.json", doc,
                                    proj.input_hash(doc))
            effort = proj.effort
            effort.record("correction", 1, frame=fi)
            proj.save_effort(effort)
        start_solve("global")
        return {"queued": True}

    def run_select():
        m = max(1, int(round(0.10 * proj.n_frames)))
        sel = greedy_max_coverage(dm(), 0.1, m)
        job.say(f"{len(sel.references)} references cover {sel.coverage} frames")
        with write_lock:
            proj.write_stage_output("selection.json",
                                    {"selection": sel.to_dict()},
                                    proj.input_hash({"m": m}))
            proj.advance_stage("selected")

    def run_solve_refs():
        proj.require_stage("annotated")
        doc = annotations()
        cfg = RefInitConfig()
        poses = []
        for r in references():
            annot = Annotation2D.from_dict(doc["frames"][str(r)])
            pose, _ = solve_reference_frame(annot, frames[r], skel, cfg)
            poses.append(pose)
            job.say(f"reference {r} solved")
        with write_lock:
            proj.write_stage_output("ref_poses.json", io.poses_to_doc(poses),
                                    proj.input_hash(doc))
            proj.advance_stage("initialized")

    def run_propagate():
        proj.require_stage("initialized")
        sel_refs = references()
        ref_poses = io.poses_from_doc(proj.stage_output("ref_poses.json"))
        job.say(f"propagating from {len(sel_refs)} references")
        result = propagate_all(frames, sel_refs, ref_poses, dm(), skel,
                               PropagateConfig())
        doc = io.poses_to_doc(result.poses)
        doc["sources"] = {str(k): v for k, v in result.sources.items()}
        with write_lock:
            proj.write_stage_output("poses_propagated.json", doc,
                                    proj.input_hash({"refs": sel_refs}))
            proj.advance_stage("propagated")
        job.say(f"{proj.n_frames} frames initialized")

    def run_global():
        proj.require_stage("propagated")
        cfg = GlobalConfig()
        sel_refs = references()
        annots = {int(k): Annotation2D.from_dict(v)
                  for k, v in annotations()["frames"].items()}
        src = proj.stage_output("poses_global.json") \
            or proj.stage_output("poses_propagated.json")
        poses = io.poses_from_doc(src)
        cdoc = proj.stage_output("corrections.json") or {"applied": []}
        corrections = [(c["frame"], c["joint"], (c["x"], c["y"]))
                       for c in cdoc.get("applied", [])]
        job.say(f"global solve over {len(poses)} frames "
                f"({len(corrections)} corrections)")
        problem, cs = build_global_problem(frames, sel_refs, annots, dm(),
                                           skel, cfg, corrections=corrections)
        refined, report = solve_global(problem, cs, poses, frames, skel, cfg)
        doc = io.poses_to_doc(refined)
        doc["solver"] = report.to_dict()
        with write_lock:
            proj.write_stage_output("poses_global.json", doc,
                                    proj.input_hash({"n": len(corrections)}))
            proj.advance_stage("globally-solved")
        job.say(f"solver: {report.termination} after {report.iterations} iterations")

    runners = {"select": run_select, "solve-refs": run_solve_refs,
               "propagate": run_propagate, "global": run_global}

    def start_solve(stage: str):
        try:
            job.start(stage, runners[stage])
        except StageError as e:
            raise HTTPException(409, str(e))

    @app.post("/api/solve/{stage}")
    def trigger_solve(stage: str):
        if stage not in SOLVE_STAGES:
            raise HTTPException(404, f"unknown stage '{stage}'")
        start_solve(stage)
        return JSONResponse({"stage": stage, "state": "running"}, status_code=202)

    @app.get("/api/solve/status")
    def solve_status():
        return job.snapshot()

    @app.get("/api/solve/stream")
    def solve_stream():
        def gen():
            seen = 0
            while True:
                snap = job.snapshot()
                for line in snap["log"][seen:]:
                    yield f"data: {json.dumps(line)}\n\n"
                seen = len(snap["log"])
                if snap["state"] in ("done", "failed", "idle"):
                    yield f"event: end\ndata: {json.dumps(snap['state'])}\n\n"
                    return
                time.sleep(0.2)
        return StreamingResponse(gen(), media_type="text/event-stream")

    def pose_store():
        for name in ("poses_global.json", "poses_propagated.json",
                     "ref_poses.json"):
            doc = proj.stage_output(name)
            if doc is not None:
                return name, {p.frame_index: p for p in io.poses_from_doc(doc)}
        return None, {}

    @app.get("/api/poses/{i}")
    def pose(i: int):
        frame_or_404(i)
        stage_name, store = pose_store()
        if i not in store:
            raise HTTPException(404, f"frame {i} has no pose yet")
        joints = store[i].joints
        uv = project(joints, cam)
        return {
            "frame": i,
            "stage": stage_name,
            "joints": [[float(c) for c in row] for row in joints],
            "reprojections": [[float(u), float(v)] for u, v in uv],
        }

    @app.get("/api/effort")
    def effort():
        return proj.effort.to_dict()

    if frontend_dir is None:
        import os
        candidate = os.path.join(os.path.dirname(__file__), "..", "..", "..",
                                 "frontend", "dist")
        frontend_dir = os.path.normpath(candidate)

    @app.get("/", response_class=HTMLResponse)
    def index():
        import os
        page = os.path.join(frontend_dir, "index.html")
        if os.path.exists(page):
            with open(page) as f:
                return f.read()
        return ("<html><body><h3>annotator UI not built</h3>"
                "<p>run <code>npm run build</code> in frontend/ and restart"
                "</p></body></html>")

    @app.get("/assets/{name}")
    def asset(name: str):
        import os
        if "/" in name or ".." in name:
            raise HTTPException(404, "no")
        path = os.path.join(frontend_dir, "assets", name)
        if not os.path.exists(path):
            raise HTTPException(404, f"no asset {name}")
        media = "text/javascript" if name.endswith(".js") else \
            "text/css" if name.endswith(".css") else "application/octet-stream"
        with open(path, "rb") as f:
            return Response(f.read(), media_type=media)

    return app
