"""Synthetic capsule-hand depth sequences with exact ground truth."""

from .model import HandModel, default_hand_model, fk, capsules_for_pose
from .motion import PoseParams, MotionScript, desk_script
from .render import RenderError, render_sequence
from .oracle import Oracle, oracle_annotate, oracle_correct

__all__ = [
    "HandModel", "default_hand_model", "fk", "capsules_for_pose",
    "PoseParams", "MotionScript", "desk_script",
    "RenderError", "render_sequence",
    "Oracle", "oracle_annotate", "oracle_correct",
]
