"""Point-cloud data model, binary I/O, cropping, global augmentation, synthetic scenes.

The on-disk format is headerless little-endian float32 records of
(x, y, z, reflectance, timestamp); a companion ``<file>.meta.json`` carries
the record count and the declared spatial range. All cropping and gridding
downstream uses half-open intervals [min, max) per axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Box3D, points_in_box

RECORD_FIELDS = 5
RECORD_BYTES = RECORD_FIELDS * 4
_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class Range3D:
    """Axis-aligned spatial extent; each axis is the half-open [min, max)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for lo, hi, axis in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y"), (self.z_min, self.z_max, "z")):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValidationError(f"range {axis} bounds must be finite")
            if not lo < hi:
                raise ValidationError(f"range {axis}: min must be < max, got [{lo}, {hi})")

    def contains_mask(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return (
            (xyz[:, 0] >= self.x_min) & (xyz[:, 0] < self.x_max)
            & (xyz[:, 1] >= self.y_min) & (xyz[:, 1] < self.y_max)
            & (xyz[:, 2] >= self.z_min) & (xyz[:, 2] < self.z_max)
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Range3D":
        try:
            return cls(**{k: float(d[k]) for k in ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")})
        except KeyError as e:
            raise ValidationError(f"range dict missing key {e}") from e


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    r: float
    t: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.r, self.t)):
            raise ValidationError("point fields must be finite")


class PointCloud:
    """Ordered point set backed by an immutable (N, 5) float64 array."""

    def __init__(self, data: np.ndarray, declared_range: Range3D | None = None):
        data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if data.size == 0:
            data = data.reshape(0, RECORD_FIELDS)
        if data.ndim != 2 or data.shape[1] != RECORD_FIELDS:
            raise ValidationError(f"point data must be (N, {RECORD_FIELDS}), got {data.shape}")
        bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
        if bad.size:
            raise ValidationError(f"non-finite values in point record {int(bad[0])}")
        data.setflags(write=False)
        self._data = data
        self.declared_range = declared_range

    @classmethod
    def from_points(cls, points, declared_range: Range3D | None = None) -> "PointCloud":
        rows = [(p.x, p.y, p.z, p.r, p.t) for p in points]
        return cls(np.array(rows, dtype=np.float64).reshape(len(rows), RECORD_FIELDS), declared_range)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def xyz(self) -> np.ndarray:
        return self._data[:, :3]

    def point(self, i: int) -> Point:
        x, y, z, r, t = self._data[i]
        return Point(x, y, z, r, t)

    def points(self) -> list[Point]:
        return [self.point(i) for i in range(len(self))]

    def __len__(self) -> int:
        return self._data.shape[0]


def save_cloud(cloud: PointCloud, path) -> None:
    """Write raw float32 records plus the ``.meta.json`` companion."""
    path = Path(path)
    path.write_bytes(cloud.data.astype(_DTYPE).tobytes())
    meta = {
        "record_count": len(cloud),
        "declared_range": cloud.declared_range.as_dict() if cloud.declared_range else None,
    }
    meta_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def load_cloud(path) -> PointCloud:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ValidationError(f"cannot read point cloud {path}: {e}") from e
    if len(raw) % RECORD_BYTES != 0:
        raise ValidationError(
            f"{path}: byte length {len(raw)} is not a multiple of the {RECORD_BYTES}-byte record size"
        )
    data = np.frombuffer(raw, dtype=_DTYPE).reshape(-1, RECORD_FIELDS).astype(np.float64)
    declared = None
    mp = meta_path(path)
    if mp.exists():
        try:
            meta = json.loads(mp.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"{mp}: malformed metadata: {e}") from e
        count = meta.get("record_count")
        if count is not None and int(count) != data.shape[0]:
            raise ValidationError(f"{path}: metadata says {count} records, file holds {data.shape[0]}")
        if meta.get("declared_range"):
            declared = Range3D.from_dict(meta["declared_range"])
    return PointCloud(data, declared)


def crop_to_range(cloud: PointCloud, rng: Range3D) -> PointCloud:
    """Keep exactly the points inside the half-open range; sets declared_range."""
    mask = rng.contains_mask(cloud.xyz)
    return PointCloud(cloud.data[mask], declared_range=rng)


# Documented bounds for global augmentation draws.
ROTATION_BOUND = math.pi / 4.0
TRANSLATION_BOUND = 0.5
SCALE_BOUNDS = (0.95, 1.05)


@dataclass(frozen=True)
class AugmentSpec:
    """Ranges for the seeded global transform; flips are Bernoulli draws.

    Applied in the fixed order flip -> rotate(z) -> translate -> scale.
    """

    flip_x_prob: float = 0.0
    flip_y_prob: float = 0.0
    rotation_range: tuple[float, float] = (0.0, 0.0)
    translation_range: tuple[float, float] = (0.0, 0.0)
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for p, name in ((self.flip_x_prob, "flip_x_prob"), (self.flip_y_prob, "flip_y_prob")):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        _check_range(self.rotation_range, -ROTATION_BOUND, ROTATION_BOUND, "rotation_range")
        _check_range(self.translation_range, -TRANSLATION_BOUND, TRANSLATION_BOUND, "translation_range")
        _check_range(self.scale_range, *SCALE_BOUNDS, "scale_range")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls()


def _check_range(r, lo, hi, name):
    if len(r) != 2 or r[0] > r[1]:
        raise ValidationError(f"{name} must be (lo, hi) with lo <= hi, got {r}")
    if r[0] < lo or r[1] > hi:
        raise ValidationError(f"{name} {r} outside documented bounds [{lo}, {hi}]")


def augment_global(
    cloud: PointCloud, boxes: list[Box3D], spec: AugmentSpec, seed: int
) -> tuple[PointCloud, list[Box3D]]:
    """Apply one seeded flip/rotate/translate/scale draw to points and boxes."""
    rng = np.random.default_rng(seed)
    flip_x = rng.random() < spec.flip_x_prob
    flip_y = rng.random() < spec.flip_y_prob
    theta = rng.uniform(*spec.rotation_range)
    shift = np.array([rng.uniform(*spec.translation_range) for _ in range(3)])
    scale = rng.uniform(*spec.scale_range)

    data = cloud.data.copy()
    if flip_x:
        data[:, 1] = -data[:, 1]
    if flip_y:
        data[:, 0] = -data[:, 0]
    c, s = math.cos(theta), math.sin(theta)
    x, y = data[:, 0].copy(), data[:, 1].copy()
    data[:, 0] = c * x - s * y
    data[:, 1] = s * x + c * y
    data[:, :3] += shift
    data[:, :3] *= scale

    out_boxes = []
    for b in boxes:
        cx, cy, cz, yaw = b.cx, b.cy, b.cz, b.yaw
        if flip_x:
            cy, yaw = -cy, -yaw
        if flip_y:
            cx, yaw = -cx, math.pi - yaw
        cx, cy = c * cx - s * cy, s * cx + c * cy
        yaw += theta
        cx, cy, cz = cx + shift[0], cy + shift[1], cz + shift[2]
        out_boxes.append(
            Box3D(cx * scale, cy * scale, cz * scale, b.l * scale, b.w * scale, b.h * scale, yaw, b.class_id)
        )
    # geometry moved, previous declared range no longer holds
    return PointCloud(data, declared_range=None), out_boxes


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene: boxes with interior points plus uniform background."""

    range: Range3D
    n_objects: int = 4
    points_per_object: int = 120
    n_background: int = 400
    length_range: tuple[float, float] = (2.0, 5.0)
    width_range: tuple[float, float] = (1.2, 2.4)
    height_range: tuple[float, float] = (1.2, 2.2)
    n_classes: int = 3
    jitter: float = 0.0

    def __post_init__(self):
        if self.n_objects < 0 or self.n_background < 0:
            raise ValidationError("object and background counts must be >= 0")
        if self.n_objects > 0 and self.points_per_object < 1:
            raise ValidationError("points_per_object must be >= 1")
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")


def generate_scene(spec: SceneSpec, seed: int) -> tuple[PointCloud, list[Box3D]]:
    """Deterministic synthetic scene; every emitted box contains its points."""
    rng = np.random.default_rng(seed)
    r = spec.range
    boxes: list[Box3D] = []
    chunks: list[np.ndarray] = []
    for _ in range(spec.n_objects):
        l = rng.uniform(*spec.length_range)
        w = rng.uniform(*spec.width_range)
        h = rng.uniform(*spec.height_range)
        yaw = rng.uniform(-math.pi, math.pi)
        margin_xy = math.hypot(l, w) / 2.0
        lo = np.array([r.x_min + margin_xy, r.y_min + margin_xy, r.z_min + h / 2.0])
        hi = np.array([r.x_max - margin_xy, r.y_max - margin_xy, r.z_max - h / 2.0])
        if np.any(lo >= hi):
            raise ValidationError(
                f"object of size ({l:.2f}, {w:.2f}, {h:.2f}) cannot fit inside the scene range"
            )
        center = rng.uniform(lo, hi)
        box = Box3D(center[0], center[1], center[2], l, w, h, yaw, class_id=int(rng.integers(spec.n_classes)))
        boxes.append(box)

        # inset from the faces so float32 storage cannot push points outside
        lim = 0.5 * np.array([l, w, h]) * (1.0 - 1e-4)
        local = rng.uniform(-1.0, 1.0, size=(spec.points_per_object, 3)) * lim
        if spec.jitter > 0.0:
            local = np.clip(local + rng.normal(0.0, spec.jitter, size=local.shape), -lim, lim)
        c, s = math.cos(yaw), math.sin(yaw)
        pts = np.empty((spec.points_per_object, RECORD_FIELDS))
        pts[:, 0] = center[0] + c * local[:, 0] - s * local[:, 1]
        pts[:, 1] = center[1] + s * local[:, 0] + c * local[:, 1]
        pts[:, 2] = center[2] + local[:, 2]
        pts[:, 3] = rng.uniform(0.0, 1.0, size=spec.points_per_object)
        pts[:, 4] = 0.0
        chunks.append(pts)

    if spec.n_background:
        bg = np.empty((spec.n_background, RECORD_FIELDS))
        bg[:, 0] = rng.uniform(r.x_min, r.x_max, size=spec.n_background)
        bg[:, 1] = rng.uniform(r.y_min, r.y_max, size=spec.n_background)
        bg[:, 2] = rng.uniform(r.z_min, r.z_max, size=spec.n_background)
        bg[:, 3] = rng.uniform(0.0, 1.0, size=spec.n_background)
        bg[:, 4] = 0.0
        chunks.append(bg)

    data = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, RECORD_FIELDS))
    # quantize to the storage precision so save/load round-trips bitwise
    data = data.astype(_DTYPE).astype(np.float64)
    cloud = PointCloud(data, declared_range=r)
    for i, box in enumerate(boxes):
        n = spec.points_per_object
        if not points_in_box(cloud.xyz[i * n : (i + 1) * n], box).all():
            raise ValidationError(f"generated box {i} lost interior points to quantization")
    return cloud, boxes
