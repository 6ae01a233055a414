"""BEV pillarization: point-to-pillar assignment, 11-d point augmentation, scatter.

Each point maps to exactly one grid cell via floor((x - x_min) / pillar_size)
on the half-open grid; pillars are full-height columns, never split in z.
No sampling or per-pillar point cap is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .pointcloud import PointCloud, Range3D

AUGMENTED_DIM = 11


@dataclass(frozen=True)
class GridConfig:
    """BEV grid geometry: spatial range plus pillar footprint in meters."""

    range: Range3D
    pillar_x: float
    pillar_y: float

    def __post_init__(self):
        if not (self.pillar_x > 0.0 and self.pillar_y > 0.0):
            raise ValidationError("pillar sizes must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValidationError("grid must have at least one cell per axis")

    @property
    def nx(self) -> int:
        return int(math.ceil((self.range.x_max - self.range.x_min) / self.pillar_x))

    @property
    def ny(self) -> int:
        return int(math.ceil((self.range.y_max - self.range.y_min) / self.pillar_y))

    @property
    def z_center(self) -> float:
        return 0.5 * (self.range.z_min + self.range.z_max)

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.range.x_min + (ix + 0.5) * self.pillar_x,
            self.range.y_min + (iy + 0.5) * self.pillar_y,
        )


@dataclass(frozen=True)
class Pillar:
    """One non-empty grid cell and the indices of its points in the source cloud."""

    ix: int
    iy: int
    point_indices: np.ndarray

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.point_indices, dtype=np.int64))
        if idx.ndim != 1 or idx.size < 1:
            raise ValidationError("a pillar must hold at least one point index")
        idx.setflags(write=False)
        object.__setattr__(self, "point_indices", idx)

    @property
    def count(self) -> int:
        return int(self.point_indices.size)


def assign_pillars(cloud: PointCloud, cfg: GridConfig) -> list[Pillar]:
    """Group every point into its pillar; result sorted by (iy, ix).

    The cloud must already be cropped to cfg.range; an out-of-range point is
    rejected with its index.
    """
    if len(cloud) == 0:
        return []
    xyz = cloud.xyz
    in_range = cfg.range.contains_mask(xyz)
    if not in_range.all():
        bad = int(np.flatnonzero(~in_range)[0])
        raise ValidationError(f"point {bad} lies outside the grid range")
    ix = np.floor((xyz[:, 0] - cfg.range.x_min) / cfg.pillar_x).astype(np.int64)
    iy = np.floor((xyz[:, 1] - cfg.range.y_min) / cfg.pillar_y).astype(np.int64)
    # division can round onto the upper edge for points just inside the range
    np.minimum(ix, cfg.nx - 1, out=ix)
    np.minimum(iy, cfg.ny - 1, out=iy)

    order = np.lexsort((ix, iy))
    key = iy[order] * cfg.nx + ix[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    bounds = np.r_[starts, key.size]
    pillars = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        members = np.sort(order[s:e])
        pillars.append(Pillar(int(ix[members[0]]), int(iy[members[0]]), members))
    return pillars


def augment_points(cloud: PointCloud, pillar: Pillar, cfg: GridConfig) -> np.ndarray:
    """Per-point 11-d features: raw (x, y, z, r, t), offsets from the pillar
    cell center (z against the mid-height of the full z extent), and
    coordinates relative to the range minimum corner. Shape (N_v, 11)."""
    if pillar.point_indices.max(initial=-1) >= len(cloud) or pillar.point_indices.min(initial=0) < 0:
        raise ValidationError("pillar indexes points outside the cloud")
    pts = cloud.data[pillar.point_indices]
    ccx, ccy = cfg.cell_center(pillar.ix, pillar.iy)
    out = np.empty((pts.shape[0], AUGMENTED_DIM))
    out[:, :5] = pts
    out[:, 5] = pts[:, 0] - ccx
    out[:, 6] = pts[:, 1] - ccy
    out[:, 7] = pts[:, 2] - cfg.z_center
    out[:, 8] = pts[:, 0] - cfg.range.x_min
    out[:, 9] = pts[:, 1] - cfg.range.y_min
    out[:, 10] = pts[:, 2] - cfg.range.z_min
    return out


@dataclass(frozen=True)
class BEVCanvas:
    """Dense pseudo-image (1, D, ny, nx) plus the pillar occupancy mask."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 1:
            raise ValidationError(f"canvas must be (1, D, ny, nx), got {self.data.shape}")
        if self.mask.shape != self.data.shape[2:]:
            raise ValidationError("occupancy mask shape must match the canvas grid")


def scatter(pillar_features, cfg: GridConfig, dim: int | None = None) -> BEVCanvas:
    """Place one feature vector per pillar on a zeroed canvas.

    Cells not covered by a pillar stay exactly zero; duplicate cells are
    rejected. ``dim`` sizes an empty canvas when no pillars are given.
    """
    items = list(pillar_features)
    if items:
        dims = {int(np.asarray(f).shape[0]) for _, f in items}
        if len(dims) != 1:
            raise ValidationError(f"feature vectors disagree on width: {sorted(dims)}")
        (dim,) = dims
    elif dim is None:
        raise ValidationError("empty scatter needs an explicit feature dim")
    data = np.zeros((1, dim, cfg.ny, cfg.nx), dtype=np.float32)
    mask = np.zeros((cfg.ny, cfg.nx), dtype=bool)
    for pillar, feat in items:
        if mask[pillar.iy, pillar.ix]:
            raise ValidationError(f"duplicate pillar cell (ix={pillar.ix}, iy={pillar.iy})")
        data[0, :, pillar.iy, pillar.ix] = np.asarray(feat, dtype=np.float32)
        mask[pillar.iy, pillar.ix] = True
    return BEVCanvas(data, mask)


def gather(canvas: BEVCanvas, pillars: list[Pillar]) -> np.ndarray:
    """Read pillar feature vectors back off the canvas, shape (P, D)."""
    return np.stack([canvas.data[0, :, p.iy, p.ix] for p in pillars]) if pillars else np.zeros((0, canvas.data.shape[1]), dtype=np.float32)
