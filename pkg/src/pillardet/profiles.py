"""Named configuration bundles wiring grid, network widths, and post-processing.

``waymo`` and ``nuscenes`` carry the published deployment constants (ranges,
pillar sizes, NMS policy, rectification exponents, loss weights). ``desk`` is
a small grid for fast end-to-end runs and tests. Profiles can also be read
from a JSON file with exactly the keys below; unknown keys are rejected.

The MAC/params analyzer additionally has an accounting profile: the compute
table is reproduced at a stage-1 resolution of 720x720 with a 64-wide stem
input, the resolution assumption under which the reference per-2-block delta
and totals hold. It is independent of the runtime canvas reduction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backbone import DEFAULT_CHANNELS, BackboneConfig
from .checkpoint import ArchConfig
from .errors import ValidationError
from .losses import LossWeights
from .pillars import GridConfig
from .pointcloud import Range3D


@dataclass(frozen=True)
class Profile:
    name: str
    grid: GridConfig
    n_classes: int
    encoder_dim: int
    stage_blocks: tuple[int, int, int, int]
    stage_channels: tuple[int, int, int, int]
    neck_channels: int
    canvas_reduction: int
    score_thresh: float
    max_detections: int
    nms_iou: tuple[float, ...] | float
    nms_class_agnostic: bool
    rectify_alpha: tuple[float, ...] | float
    loss_weights: LossWeights

    def __post_init__(self):
        if self.canvas_reduction not in (1, 2):
            raise ValidationError("canvas_reduction must be 1 or 2")
        for v, name in ((self.nms_iou, "nms_iou"), (self.rectify_alpha, "rectify_alpha")):
            if not isinstance(v, (int, float)) and len(v) != self.n_classes:
                raise ValidationError(f"per-class {name} needs {self.n_classes} entries")

    @property
    def out_stride(self) -> int:
        # stem keeps resolution; stages 2-4 halve; plus the canvas reduction
        return 4 * self.canvas_reduction

    def arch(self) -> ArchConfig:
        return ArchConfig(
            encoder_dim=self.encoder_dim,
            stage_blocks=self.stage_blocks,
            stage_channels=self.stage_channels,
            neck_channels=self.neck_channels,
            n_classes=self.n_classes,
        )


WAYMO = Profile(
    name="waymo",
    grid=GridConfig(Range3D(-75.2, 75.2, -75.2, 75.2, -2.0, 4.0), 0.2, 0.2),
    n_classes=3,
    encoder_dim=64,
    stage_blocks=(6, 6, 3, 1),
    stage_channels=DEFAULT_CHANNELS,
    neck_channels=128,
    canvas_reduction=2,
    score_thresh=0.1,
    max_detections=200,
    nms_iou=(0.8, 0.55, 0.55),
    nms_class_agnostic=False,
    rectify_alpha=(0.68, 0.71, 0.65),
    loss_weights=LossWeights(1.0, 1.0, 0.25),
)

NUSCENES = Profile(
    name="nuscenes",
    grid=GridConfig(Range3D(-54.0, 54.0, -54.0, 54.0, -5.0, 3.0), 0.15, 0.15),
    n_classes=10,
    encoder_dim=64,
    stage_blocks=(6, 6, 3, 1),
    stage_channels=DEFAULT_CHANNELS,
    neck_channels=128,
    canvas_reduction=2,
    score_thresh=0.2,
    max_detections=200,
    nms_iou=0.2,
    nms_class_agnostic=True,
    rectify_alpha=0.5,
    loss_weights=LossWeights(1.0, 1.0, 0.25),
)

DESK = Profile(
    name="desk",
    grid=GridConfig(Range3D(-6.4, 6.4, -6.4, 6.4, -2.0, 2.0), 0.2, 0.2),
    n_classes=3,
    encoder_dim=8,
    stage_blocks=(1, 1, 1, 1),
    stage_channels=(8, 16, 32, 64),
    neck_channels=16,
    canvas_reduction=2,
    score_thresh=0.3,
    max_detections=50,
    nms_iou=(0.5, 0.5, 0.5),
    nms_class_agnostic=False,
    rectify_alpha=0.5,
    loss_weights=LossWeights(1.0, 1.0, 0.25),
)

BUILTIN = {p.name: p for p in (WAYMO, NUSCENES, DESK)}

# Accounting assumptions under which the reference compute table holds.
FLOPS_ACCOUNTING_HW = (720, 720)
FLOPS_ACCOUNTING_IN_CHANNELS = 64


def flops_config(stage_blocks, profile: Profile | None = None) -> BackboneConfig:
    """Backbone config for MAC accounting at the documented table resolution."""
    channels = profile.stage_channels if profile else DEFAULT_CHANNELS
    return BackboneConfig(
        stage_blocks=tuple(int(b) for b in stage_blocks),
        stage_channels=channels,
        in_channels=FLOPS_ACCOUNTING_IN_CHANNELS,
        input_hw=FLOPS_ACCOUNTING_HW,
    )


_PROFILE_KEYS = {
    "name": str,
    "range": dict,
    "pillar_size": list,
    "n_classes": int,
    "encoder_dim": int,
    "stage_blocks": list,
    "stage_channels": list,
    "neck_channels": int,
    "canvas_reduction": int,
    "score_thresh": float,
    "max_detections": int,
    "nms_iou": (float, list),
    "nms_class_agnostic": bool,
    "rectify_alpha": (float, list),
    "loss_weights": list,
}


def profile_from_dict(d: dict) -> Profile:
    unknown = set(d) - set(_PROFILE_KEYS)
    if unknown:
        raise ValidationError(f"unknown profile keys: {sorted(unknown)}")
    missing = set(_PROFILE_KEYS) - set(d)
    if missing:
        raise ValidationError(f"profile is missing keys: {sorted(missing)}")
    try:
        nms_iou = d["nms_iou"]
        alpha = d["rectify_alpha"]
        lw = [float(v) for v in d["loss_weights"]]
        if len(lw) != 3:
            raise ValidationError("loss_weights must have 3 entries")
        return Profile(
            name=str(d["name"]),
            grid=GridConfig(Range3D.from_dict(d["range"]), float(d["pillar_size"][0]), float(d["pillar_size"][1])),
            n_classes=int(d["n_classes"]),
            encoder_dim=int(d["encoder_dim"]),
            stage_blocks=tuple(int(v) for v in d["stage_blocks"]),
            stage_channels=tuple(int(v) for v in d["stage_channels"]),
            neck_channels=int(d["neck_channels"]),
            canvas_reduction=int(d["canvas_reduction"]),
            score_thresh=float(d["score_thresh"]),
            max_detections=int(d["max_detections"]),
            nms_iou=float(nms_iou) if isinstance(nms_iou, (int, float)) else tuple(float(v) for v in nms_iou),
            nms_class_agnostic=bool(d["nms_class_agnostic"]),
            rectify_alpha=float(alpha) if isinstance(alpha, (int, float)) else tuple(float(v) for v in alpha),
            loss_weights=LossWeights(*lw),
        )
    except (TypeError, ValueError, IndexError) as e:
        raise ValidationError(f"bad profile value: {e}") from e


def load_profile(name_or_path: str) -> Profile:
    """Resolve a built-in profile name or read a JSON profile file."""
    if name_or_path in BUILTIN:
        return BUILTIN[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ValidationError(
            f"unknown profile {name_or_path!r}; built-ins: {sorted(BUILTIN)} or a JSON file path"
        )
    try:
        return profile_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: malformed profile JSON: {e}") from e
