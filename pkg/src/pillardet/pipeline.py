"""End-to-end orchestration: pillarize -> encode -> scatter -> backbone ->
neck -> head -> decode -> rectify -> NMS, plus the fused/train equivalence
probe and the target-to-head-output fixture bridge.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import backbone_forward, neck_fuse
from .checkpoint import ArchConfig, PipelineParams, backbone_config, fuse_params
from .encoder import encode_pillar
from .errors import ValidationError
from .head import (
    HEATMAP_CLAMP,
    Detection,
    HeadOutput,
    decode,
    head_forward,
    nms,
    rectify_detections,
)
from .losses import Targets
from .nn import maxpool2
from .pillars import assign_pillars, augment_points, scatter
from .pointcloud import PointCloud, crop_to_range
from .profiles import Profile


@dataclass
class StageTimes:
    encode: float = 0.0
    backbone: float = 0.0
    head: float = 0.0
    post: float = 0.0

    def as_dict(self) -> dict:
        return {"encode": self.encode, "backbone": self.backbone, "head": self.head, "post": self.post}


def network_forward(canvas_data: np.ndarray, params: PipelineParams, profile: Profile) -> HeadOutput:
    """Dense path from the scattered canvas to head predictions."""
    x = canvas_data
    reduction = profile.canvas_reduction
    while reduction > 1:
        x = maxpool2(x)
        reduction //= 2
    stages = backbone_forward(x, params.backbone)
    fused = neck_fuse(stages[2], stages[3], params.neck)
    return head_forward(fused, params.head)


def run_detect(
    cloud: PointCloud,
    params: PipelineParams,
    profile: Profile,
    inject_head: HeadOutput | None = None,
    times: StageTimes | None = None,
) -> list[Detection]:
    """Full detection pass; an injected head output replaces the network's."""
    t = times or StageTimes()

    t0 = time.perf_counter()
    cropped = crop_to_range(cloud, profile.grid.range)
    pillars = assign_pillars(cropped, profile.grid)
    feats = [
        encode_pillar(augment_points(cropped, p, profile.grid), params.encoder, keep_intermediates=False).f
        for p in pillars
    ]
    canvas = scatter(zip(pillars, feats), profile.grid, dim=profile.encoder_dim)
    t.encode = time.perf_counter() - t0

    if not pillars and inject_head is None:
        return []

    t0 = time.perf_counter()
    if inject_head is None:
        head_out = network_forward(canvas.data, params, profile)
        t.backbone = time.perf_counter() - t0
        t0 = time.perf_counter()
    else:
        head_out = inject_head
        t.backbone = 0.0

    dets = decode(
        head_out,
        profile.grid,
        profile.out_stride,
        k=profile.max_detections,
        score_thresh=profile.score_thresh,
    )
    t.head = time.perf_counter() - t0

    t0 = time.perf_counter()
    dets = rectify_detections(dets, profile.rectify_alpha)
    dets = nms(dets, profile.nms_iou, class_agnostic=profile.nms_class_agnostic)
    t.post = time.perf_counter() - t0
    return dets


def head_output_from_targets(targets: Targets) -> HeadOutput:
    """Assemble a synthetic head output that decodes back to the target boxes.

    The heatmap is clamped into the open interval the head contract requires;
    quality targets 2*(I - 0.5) pass through as the raw IoU channel.
    """
    heatmap = np.clip(targets.heatmap, HEATMAP_CLAMP, 1.0 - HEATMAP_CLAMP)
    return HeadOutput(
        heatmap=heatmap,
        offset=targets.reg[0:2],
        z=targets.reg[2:3],
        size=targets.reg[3:6],
        yaw=targets.reg[6:8],
        iou=2.0 * targets.iou - 1.0,
    )


def fusion_discrepancy(
    params: PipelineParams,
    arch: ArchConfig,
    n_probes: int = 8,
    spatial: int = 16,
    seed: int = 0,
) -> float:
    """Max relative disagreement between train-mode and fused network forwards.

    Probes random canvases through both parameter sets and compares every
    head channel; the scale is the largest absolute output value.
    """
    if params.mode != "train":
        raise ValidationError("fusion probe needs a train-mode checkpoint")
    fused = fuse_params(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfg = backbone_config(arch, input_hw=(spatial, spatial))
    for _ in range(n_probes):
        x = rng.normal(0.0, 1.0, (1, cfg.in_channels, spatial, spatial)).astype(np.float32)
        a = _forward_raw(x, params, arch)
        b = _forward_raw(x, fused, arch)
        scale = max(float(np.max(np.abs(a))), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - b))) / scale)
    return worst


def _forward_raw(x: np.ndarray, params: PipelineParams, arch: ArchConfig) -> np.ndarray:
    stages = backbone_forward(x, params.backbone)
    fused_map = neck_fuse(stages[2], stages[3], params.neck)
    out = head_forward(fused_map, params.head)
    return np.concatenate([out.heatmap, out.offset, out.z, out.size, out.yaw, out.iou], axis=0)
