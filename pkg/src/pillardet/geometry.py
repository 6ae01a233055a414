"""Oriented-box geometry on the BEV plane.

Boxes are 7-DoF (center, size, heading). The BEV footprint is the rectangle
of extent l (along heading) by w (across), rotated by yaw about the center.
Overlap is computed exactly via convex polygon clipping; a variant also
propagates jacobians of the intersection area with respect to the first
box's (cx, cy, l, w, yaw) so losses can use exact piecewise gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

TWO_PI = 2.0 * math.pi


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    y = (yaw + math.pi) % TWO_PI - math.pi
    # fmod can land exactly on pi for inputs like -pi - eps
    return -math.pi if y >= math.pi else y


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), size (m), heading (rad), class id."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box has non-finite fields: {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def bev_area(self) -> float:
        return self.l * self.w


# Corner sign pattern, counter-clockwise in the box frame.
_CORNER_SIGNS = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))


def bev_corners(box: Box3D) -> np.ndarray:
    """Return the four BEV footprint corners, CCW, shape (4, 2)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.empty((4, 2))
    for i, (sx, sy) in enumerate(_CORNER_SIGNS):
        dx, dy = sx * box.l / 2.0, sy * box.w / 2.0
        out[i, 0] = box.cx + c * dx - s * dy
        out[i, 1] = box.cy + s * dx + c * dy
    return out


def points_in_box(xyz: np.ndarray, box: Box3D, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box (closed faces, +/- tol meters)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return (
        (np.abs(local_x) <= box.l / 2.0 + tol)
        & (np.abs(local_y) <= box.w / 2.0 + tol)
        & (np.abs(xyz[:, 2] - box.cz) <= box.h / 2.0 + tol)
    )


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for CCW vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex CCW subject by a convex CCW clip polygon."""
    poly = [(subject[i], None) for i in range(len(subject))]
    poly = _clip_tracked(poly, clip)
    if not poly:
        return np.zeros((0, 2))
    return np.array([p for p, _ in poly])


def _clip_tracked(poly, clip):
    """Clip a list of (point, jacobian-or-None) vertices by each CCW clip edge.

    Jacobians are 2x5 derivatives of the vertex position w.r.t. the subject
    box parameters (cx, cy, l, w, yaw); intersection vertices get the exact
    chain-rule jacobian of the crossing point.
    """
    n_clip = len(clip)
    for e in range(n_clip):
        if not poly:
            return []
        a = clip[e]
        b = clip[(e + 1) % n_clip]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        def side_jac(jac):
            return ex * jac[1] - ey * jac[0] if jac is not None else None

        out = []
        n = len(poly)
        for i in range(n):
            p, jp = poly[i]
            q, jq = poly[(i + 1) % n]
            sp, sq = side(p), side(q)
            if sp >= 0.0:
                out.append((p, jp))
            if (sp >= 0.0) != (sq >= 0.0):
                denom = sp - sq
                t = sp / denom
                pos = p + t * (q - p)
                dsp, dsq = side_jac(jp), side_jac(jq)
                if dsp is None and dsq is None:
                    jac = None
                else:
                    z = np.zeros(5)
                    dsp = z if dsp is None else dsp
                    dsq = z if dsq is None else dsq
                    jp_ = np.zeros((2, 5)) if jp is None else jp
                    jq_ = np.zeros((2, 5)) if jq is None else jq
                    dt = (-sq * dsp + sp * dsq) / (denom * denom)
                    jac = jp_ + t * (jq_ - jp_) + np.outer(q - p, dt)
                out.append((pos, jac))
        poly = out
    return poly


def _check_boxes(a: Box3D, b: Box3D):
    if a.bev_area() <= 0.0 or b.bev_area() <= 0.0:
        raise ValidationError("degenerate zero-area box")


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """Exact BEV IoU of two oriented boxes via convex polygon intersection."""
    _check_boxes(a, b)
    inter = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    union = a.bev_area() + b.bev_area() - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _corners_with_jac(box: Box3D):
    """BEV corners plus 2x5 jacobians w.r.t. (cx, cy, l, w, yaw)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = []
    for sx, sy in _CORNER_SIGNS:
        dx, dy = sx * box.l / 2.0, sy * box.w / 2.0
        pos = np.array([box.cx + c * dx - s * dy, box.cy + s * dx + c * dy])
        jac = np.zeros((2, 5))
        jac[0, 0] = 1.0
        jac[1, 1] = 1.0
        jac[0, 2] = c * sx / 2.0
        jac[1, 2] = s * sx / 2.0
        jac[0, 3] = -s * sy / 2.0
        jac[1, 3] = c * sy / 2.0
        jac[0, 4] = -s * dx - c * dy
        jac[1, 4] = c * dx - s * dy
        out.append((pos, jac))
    return out


def iou_bev_with_grad(pred: Box3D, gt: Box3D) -> tuple[float, np.ndarray]:
    """BEV IoU and its gradient w.r.t. pred's (cx, cy, l, w, yaw).

    The gradient is exact wherever the clipped-polygon combinatorics are
    locally constant (almost everywhere); at configuration changes a one-sided
    value is returned.
    """
    _check_boxes(pred, gt)
    poly = _clip_tracked(_corners_with_jac(pred), bev_corners(gt))
    inter = 0.0
    d_inter = np.zeros(5)
    if len(poly) >= 3:
        n = len(poly)
        for i in range(n):
            p, jp = poly[i]
            q, jq = poly[(i + 1) % n]
            jp = np.zeros((2, 5)) if jp is None else jp
            jq = np.zeros((2, 5)) if jq is None else jq
            inter += p[0] * q[1] - q[0] * p[1]
            d_inter += jp[0] * q[1] + p[0] * jq[1] - jq[0] * p[1] - q[0] * jp[1]
        inter *= 0.5
        d_inter *= 0.5
    area_p = pred.bev_area()
    d_area_p = np.array([0.0, 0.0, pred.w, pred.l, 0.0])
    union = area_p + gt.bev_area() - inter
    iou = inter / union
    d_iou = (d_inter * union - inter * (d_area_p - d_inter)) / (union * union)
    return float(iou), d_iou


def diou_penalty_with_grad(pred: Box3D, gt: Box3D) -> tuple[float, np.ndarray]:
    """Center-distance penalty d^2/c^2 over the merged axis-aligned enclosure.

    c is the diagonal of the smallest axis-aligned BEV box covering both
    footprints; gradient is w.r.t. pred's (cx, cy, l, w, yaw).
    """
    d2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    dd2 = np.array([2.0 * (pred.cx - gt.cx), 2.0 * (pred.cy - gt.cy), 0.0, 0.0, 0.0])

    pred_cs = _corners_with_jac(pred)
    gt_cs = [(p, np.zeros((2, 5))) for p in bev_corners(gt)]
    corners = pred_cs + gt_cs
    xs = np.array([p[0] for p, _ in corners])
    ys = np.array([p[1] for p, _ in corners])
    i_xmax, i_xmin = int(np.argmax(xs)), int(np.argmin(xs))
    i_ymax, i_ymin = int(np.argmax(ys)), int(np.argmin(ys))
    ew = xs[i_xmax] - xs[i_xmin]
    eh = ys[i_ymax] - ys[i_ymin]
    c2 = ew * ew + eh * eh
    dc2 = 2.0 * ew * (corners[i_xmax][1][0] - corners[i_xmin][1][0]) + 2.0 * eh * (
        corners[i_ymax][1][1] - corners[i_ymin][1][1]
    )
    pen = d2 / c2
    dpen = (dd2 * c2 - d2 * dc2) / (c2 * c2)
    return float(pen), dpen
