"""Project state: a directory with frames, annotations, poses, reports,
and a forward-only pipeline stage marker.

Stage outputs are stamped with a hash of their inputs so re-running a
stage with unchanged inputs is a no-op and changed inputs invalidate
downstream results.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics, DepthFrame, GeometryError, Skeleton
from . import io

STAGES = ("loaded", "selected", "annotated", "initialized", "propagated",
          "globally-solved")


class StageError(RuntimeError):
    """Raised when a command runs before its prerequisite stage."""


def stage_index(name: str) -> int:
    if name not in STAGES:
        raise GeometryError(f"unknown stage {name!r}")
    return STAGES.index(name)


@dataclass
class Effort:
    """Annotator work counters: the cost the tool is meant to minimize."""

    clicks: int = 0
    corrections: int = 0
    frames_annotated: int = 0
    events: list = None

    def __post_init__(self):
        if self.events is None:
            self.events = []

    def record(self, kind: str, count: int = 1, frame: int = None) -> None:
        if kind == "click":
            self.clicks += count
        elif kind == "correction":
            self.corrections += count
        elif kind == "frame":
            self.frames_annotated += count
        ev = {"kind": kind, "count": count, "t": time.time()}
        if frame is not None:
            ev["frame"] = frame
        self.events.append(ev)

    def to_dict(self) -> dict:
        return {"clicks": self.clicks, "corrections": self.corrections,
                "frames_annotated": self.frames_annotated,
                "events": self.events}

    @classmethod
    def from_dict(cls, d: dict) -> "Effort":
        return cls(d.get("clicks", 0), d.get("corrections", 0),
                   d.get("frames_annotated", 0), list(d.get("events", [])))


class Project:
    """Pipeline state rooted at a directory. Loading is lazy; mutation
    happens through stage methods that persist immediately."""

    def __init__(self, root: str):
        self.root = root
        self._frames = None
        self._meta = None

    # ---- paths ----
    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def meta_path(self):
        return self.path("project.json")

    def exists(self) -> bool:
        return os.path.exists(self.meta_path)

    # ---- metadata ----
    @property
    def meta(self) -> dict:
        if self._meta is None:
            if not self.exists():
                raise StageError(f"no project at {self.root}; run synth first")
            self._meta = io.read_json(self.meta_path)
        return self._meta

    def save_meta(self) -> None:
        io.write_json(self.meta_path, self.meta)

    @property
    def stage(self) -> str:
        return self.meta["stage"]

    def require_stage(self, minimum: str) -> None:
        if stage_index(self.stage) < stage_index(minimum):
            raise StageError(
                f"project is at stage '{self.stage}'; this step needs "
                f"'{minimum}' first")

    def advance_stage(self, new: str) -> None:
        # forward or re-entrant; never backward
        if stage_index(new) >= stage_index(self.stage):
            self.meta["stage"] = new
            self.save_meta()

    @property
    def effort(self) -> Effort:
        return Effort.from_dict(self.meta.get("effort", {}))

    def save_effort(self, effort: Effort) -> None:
        self.meta["effort"] = effort.to_dict()
        self.save_meta()

    # ---- core objects ----
    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(self.meta["camera"])

    @property
    def skeleton(self) -> Skeleton:
        return Skeleton.from_dict(self.meta["skeleton"])

    @property
    def n_frames(self) -> int:
        return int(self.meta["n_frames"])

    def frames(self):
        if self._frames is None:
            self._frames = io.load_frames(self.path("frames"), self.camera,
                                          self.n_frames)
        return self._frames

    # ---- input hashing for stage skip/invalidation ----
    def input_hash(self, *docs) -> str:
        h = hashlib.sha256()
        for d in docs:
            h.update(io.dumps_canonical(d).encode())
        return h.hexdigest()[:16]

    def stage_output(self, name: str):
        """Load a stage output document or None."""
        p = self.path(name)
        return io.read_json(p) if os.path.exists(p) else None

    def write_stage_output(self, name: str, doc: dict, inputs_hash: str) -> None:
        doc = dict(doc)
        doc["inputs_hash"] = inputs_hash
        io.write_json(self.path(name), doc)

    def stage_is_current(self, name: str, inputs_hash: str) -> bool:
        doc = self.stage_output(name)
        return doc is not None and doc.get("inputs_hash") == inputs_hash


def create_project(root: str, camera: CameraIntrinsics, skeleton: Skeleton,
                   n_frames: int, seed: int, extra: dict = None) -> Project:
    os.makedirs(root, exist_ok=True)
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    os.makedirs(os.path.join(root, "reports"), exist_ok=True)
    meta = {
        "stage": "loaded",
        "camera": camera.to_dict(),
        "skeleton": skeleton.to_dict(),
        "n_frames": int(n_frames),
        "seed": int(seed),
        "effort": Effort().to_dict(),
    }
    if extra:
        meta.update(extra)
    proj = Project(root)
    proj._meta = meta
    proj.save_meta()
    return proj
