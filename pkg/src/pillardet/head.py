"""Center-based detection head: peak decoding, score rectification, rotated NMS.

The head map lives at ``out_stride`` grid cells per head cell. Offsets are
measured from the cell's geometric center, so a zero offset decodes to the
cell center. Predicted localization quality (the IoU channel) lives in
[-1, 1] and is remapped to [0, 1] at decode; the final score blends the
classification and IoU scores as cls^(1-alpha) * iou^alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Box3D, normalize_yaw, rotated_iou_bev
from .nn import ConvParams, conv2d
from .pillars import GridConfig

REG_CHANNELS = 8  # off_x, off_y, z, log l, log w, log h, sin yaw, cos yaw
HEATMAP_CLAMP = 1e-4


@dataclass(frozen=True)
class HeadOutput:
    """Dense per-cell predictions; all channel groups share (h, w)."""

    heatmap: np.ndarray  # (classes, h, w), values in (0, 1)
    offset: np.ndarray  # (2, h, w), from the cell center, in cells
    z: np.ndarray  # (1, h, w), absolute center height
    size: np.ndarray  # (3, h, w), log-scale (l, w, h)
    yaw: np.ndarray  # (2, h, w), (sin, cos)
    iou: np.ndarray  # (1, h, w), in [-1, 1]

    def __post_init__(self):
        hw = np.asarray(self.heatmap).shape[1:]
        for name, c in (("offset", 2), ("z", 1), ("size", 3), ("yaw", 2), ("iou", 1)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (c, *hw):
                raise ValidationError(f"head {name} must have shape ({c}, {hw[0]}, {hw[1]}), got {arr.shape}")
            object.__setattr__(self, name, arr)
        hm = np.asarray(self.heatmap, dtype=np.float64)
        if hm.ndim != 3:
            raise ValidationError(f"heatmap must be (classes, h, w), got {hm.shape}")
        if np.any(hm <= 0.0) or np.any(hm >= 1.0):
            raise ValidationError("heatmap values must lie strictly in (0, 1)")
        object.__setattr__(self, "heatmap", hm)

    @property
    def n_classes(self) -> int:
        return self.heatmap.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.heatmap.shape[1:]


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: int
    cls_score: float
    iou_score: float
    final_score: float


def head_map_hw(grid: GridConfig, out_stride: int) -> tuple[int, int]:
    """Head map dims: the grid halved log2(out_stride) times (ceil per step)."""
    if out_stride < 1 or out_stride & (out_stride - 1):
        raise ValidationError(f"out_stride must be a power of two, got {out_stride}")
    h, w = grid.ny, grid.nx
    while out_stride > 1:
        h, w = (h + 1) // 2, (w + 1) // 2
        out_stride //= 2
    return h, w


def _local_peaks(heatmap: np.ndarray) -> np.ndarray:
    """Cells that are >= all 8 neighbours, per class."""
    k, h, w = heatmap.shape
    padded = np.full((k, h + 2, w + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heatmap
    peak = np.ones_like(heatmap, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            peak &= heatmap >= padded[:, 1 + dy : h + 1 + dy, 1 + dx : w + 1 + dx]
    return peak


def decode(
    out: HeadOutput,
    grid: GridConfig,
    out_stride: int,
    k: int = 100,
    score_thresh: float = 0.1,
) -> list[Detection]:
    """Top-k heatmap peaks above threshold, decoded to world-frame boxes.

    Ties are broken deterministically by (row, col) order. Detections carry
    final_score = cls_score until rectification is applied.
    """
    peaks = _local_peaks(out.heatmap) & (out.heatmap > score_thresh)
    cls_idx, rows, cols = np.nonzero(peaks)
    if cls_idx.size == 0:
        return []
    scores = out.heatmap[cls_idx, rows, cols]
    order = np.lexsort((cls_idx, cols, rows, -scores))[:k]

    cell_x = out_stride * grid.pillar_x
    cell_y = out_stride * grid.pillar_y
    dets = []
    for i in order:
        c, r, col = int(cls_idx[i]), int(rows[i]), int(cols[i])
        cx = grid.range.x_min + (col + 0.5 + out.offset[0, r, col]) * cell_x
        cy = grid.range.y_min + (r + 0.5 + out.offset[1, r, col]) * cell_y
        cz = out.z[0, r, col]
        l, w, h = np.exp(out.size[:, r, col])
        yaw = math.atan2(out.yaw[0, r, col], out.yaw[1, r, col])
        iou_score = float(min(max((out.iou[0, r, col] + 1.0) / 2.0, 0.0), 1.0))
        cls_score = float(scores[i])
        dets.append(
            Detection(
                box=Box3D(cx, cy, float(cz), float(l), float(w), float(h), normalize_yaw(yaw), c),
                class_id=c,
                cls_score=cls_score,
                iou_score=iou_score,
                final_score=cls_score,
            )
        )
    return dets


def rectify_score(cls_score: float, iou_score: float, alpha: float) -> float:
    """Blend classification confidence with predicted localization quality."""
    if not 0.0 < cls_score <= 1.0:
        raise ValidationError(f"cls_score must be in (0, 1], got {cls_score}")
    if not 0.0 <= iou_score <= 1.0:
        raise ValidationError(f"iou_score must be in [0, 1], got {iou_score}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    return float(cls_score ** (1.0 - alpha) * iou_score**alpha)


def rectify_detections(dets: list[Detection], alpha) -> list[Detection]:
    """Apply rectification; ``alpha`` is a scalar or a per-class sequence."""
    out = []
    for d in dets:
        a = alpha if np.isscalar(alpha) else alpha[d.class_id]
        out.append(replace(d, final_score=rectify_score(d.cls_score, d.iou_score, float(a))))
    return out


def nms(dets: list[Detection], iou_thresh, class_agnostic: bool = False) -> list[Detection]:
    """Greedy suppression by descending final score using rotated BEV IoU.

    ``iou_thresh`` is a scalar or per-class sequence (ignored across classes
    unless class_agnostic). Ties are broken by input order, which makes the
    result deterministic.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].final_score, i))
    kept: list[int] = []
    for i in order:
        d = dets[i]
        thresh = float(iou_thresh if np.isscalar(iou_thresh) else iou_thresh[d.class_id])
        suppressed = False
        for j in kept:
            kd = dets[j]
            if not class_agnostic and kd.class_id != d.class_id:
                continue
            if rotated_iou_bev(kd.box, d.box) > thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    kept.sort()
    return [dets[i] for i in kept]


@dataclass(frozen=True)
class HeadParams:
    """1x1 prediction convs over the neck features, one per output group."""

    hm: ConvParams
    offset: ConvParams
    z: ConvParams
    size: ConvParams
    yaw: ConvParams
    iou: ConvParams


# keeps the classification map near zero on empty input
HEATMAP_BIAS = -4.595119850134589  # sigmoid(-4.5951..) ~= 0.01


def build_head(neck_channels: int, n_classes: int, rng: np.random.Generator | None = None) -> HeadParams:
    def conv(c_out, bias_fill=0.0):
        if rng is None:
            kern = np.zeros((c_out, neck_channels, 1, 1))
        else:
            kern = rng.normal(0.0, 1.0, (c_out, neck_channels, 1, 1)) / np.sqrt(neck_channels)
        return ConvParams(kern, np.full(c_out, bias_fill))

    return HeadParams(
        hm=conv(n_classes, HEATMAP_BIAS),
        offset=conv(2),
        z=conv(1),
        size=conv(3),
        yaw=conv(2),
        iou=conv(1),
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def head_forward(features: np.ndarray, params: HeadParams) -> HeadOutput:
    """Apply the prediction convs to a single-sample (1, C, h, w) feature map."""
    def squeeze(arr):
        return np.asarray(arr, dtype=np.float64)[0]

    hm = np.clip(_sigmoid(squeeze(conv2d(features, params.hm))), HEATMAP_CLAMP, 1.0 - HEATMAP_CLAMP)
    return HeadOutput(
        heatmap=hm,
        offset=squeeze(conv2d(features, params.offset)),
        z=squeeze(conv2d(features, params.z)),
        size=squeeze(conv2d(features, params.size)),
        yaw=squeeze(conv2d(features, params.yaw)),
        iou=np.tanh(squeeze(conv2d(features, params.iou))),
    )


DETECTION_FIELDS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "class", "cls_score", "iou_score", "final_score")


def format_detection(d: Detection) -> str:
    vals = (
        d.box.cx, d.box.cy, d.box.cz, d.box.l, d.box.w, d.box.h, d.box.yaw,
        d.class_id, d.cls_score, d.iou_score, d.final_score,
    )
    return ",".join(str(int(v)) if name == "class" else repr(float(v)) for name, v in zip(DETECTION_FIELDS, vals))


def write_detections(dets: list[Detection], path) -> None:
    lines = [",".join(DETECTION_FIELDS)]
    lines += [format_detection(d) for d in dets]
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path) -> list[Detection]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(DETECTION_FIELDS):
        raise ValidationError(f"{path}: missing or unexpected detection header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(DETECTION_FIELDS):
            raise ValidationError(f"{path}: malformed detection record: {ln!r}")
        cx, cy, cz, l, w, h, yaw = (float(v) for v in parts[:7])
        cls = int(parts[7])
        cls_score, iou_score, final_score = (float(v) for v in parts[8:])
        out.append(
            Detection(Box3D(cx, cy, cz, l, w, h, yaw, cls), cls, cls_score, iou_score, final_score)
        )
    return out


def save_head_output(out: HeadOutput, path) -> None:
    np.savez(path, heatmap=out.heatmap, offset=out.offset, z=out.z, size=out.size, yaw=out.yaw, iou=out.iou)


def load_head_output(path) -> HeadOutput:
    try:
        with np.load(path) as data:
            return HeadOutput(**{k: data[k] for k in ("heatmap", "offset", "z", "size", "yaw", "iou")})
    except (OSError, KeyError, ValueError) as e:
        raise ValidationError(f"cannot load head output from {path}: {e}") from e
