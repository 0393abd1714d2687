"""Point-cloud geometry: labeled clouds, yaw-oriented boxes and the scan filters.

Points are carried as ``(P, 4)`` float64 arrays with columns
``x, y, z, intensity`` in the sensor frame (x forward, y left, z up).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NO_OBJECT = 0

KITTI_CLASSES = ("NoObject", "Car", "Truck", "Van", "Pedestrian", "Cyclist")


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class names; position is the class id and index 0 is NoObject."""

    names: tuple[str, ...] = KITTI_CLASSES

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("catalog must not be empty")
        if names[0] != "NoObject":
            raise ValueError(f"catalog index 0 must be 'NoObject', got {names[0]!r}")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in catalog: {names}")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def ids(self, names: Iterable[str]) -> frozenset[int]:
        return frozenset(self.index(n) for n in names)

    @property
    def object_ids(self) -> frozenset[int]:
        return frozenset(range(1, len(self.names)))


def as_points(points) -> np.ndarray:
    """Coerce to a ``(P, 4)`` float64 array; xyz-only input gets zero intensity."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise ValueError(f"points must have shape (P, 3) or (P, 4), got {arr.shape}")
    if arr.shape[1] == 3:
        arr = np.concatenate([arr, np.zeros((len(arr), 1))], axis=1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("points contain non-finite coordinates")
    return arr


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class OrientedBox3:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # length (along heading), width, height
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        dims = tuple(float(d) for d in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("center and dims must have three components")
        if not all(math.isfinite(c) for c in center):
            raise ValueError(f"non-finite box center {center}")
        if not all(math.isfinite(d) and d > 0 for d in dims):
            raise ValueError(f"box dims must be strictly positive, got {dims}")
        if not math.isfinite(self.yaw):
            raise ValueError("box yaw must be finite")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        length, width, height = self.dims
        return length * width * height

    def to_local(self, xyz) -> np.ndarray:
        """Express points in the box frame (translate by -center, rotate by -yaw)."""
        xyz = np.asarray(xyz, dtype=np.float64)[..., :3]
        d = xyz - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.empty_like(d)
        local[..., 0] = c * d[..., 0] + s * d[..., 1]
        local[..., 1] = -s * d[..., 0] + c * d[..., 1]
        local[..., 2] = d[..., 2]
        return local

    def contains(self, xyz) -> np.ndarray | bool:
        """Boundary-inclusive containment; vectorized over leading axes."""
        local = self.to_local(xyz)
        half = np.asarray(self.dims) / 2.0
        inside = np.all(np.abs(local) <= half, axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def corners(self) -> np.ndarray:
        """The 8 corners as an ``(8, 3)`` array."""
        length, width, height = self.dims
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = signs * np.array([length, width, height]) / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center)


def contains(box: OrientedBox3, p) -> bool:
    return bool(box.contains(np.asarray(p, dtype=np.float64)[:3]))


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    points: np.ndarray
    labels: np.ndarray
    scene_id: str = field(default="", compare=False)

    def __post_init__(self):
        points = as_points(self.points)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(points) != len(labels):
            raise ValueError(f"{len(points)} points but {len(labels)} labels")
        if len(labels) and labels.min() < 0:
            raise ValueError("negative class id")
        points.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def validate(self, catalog: ClassCatalog) -> None:
        if len(self.labels) and self.labels.max() >= len(catalog):
            raise ValueError(f"label {self.labels.max()} outside catalog of size {len(catalog)}")

    def select(self, mask) -> "LabeledCloud":
        return LabeledCloud(self.points[mask], self.labels[mask], self.scene_id)

    def with_labels(self, labels) -> "LabeledCloud":
        return LabeledCloud(self.points, labels, self.scene_id)


def label_points(points, annotations: Sequence[tuple[OrientedBox3, int]], scene_id: str = "") -> LabeledCloud:
    """Assign each point the class of the box containing it.

    A point inside several boxes takes the class of the smallest-volume box;
    equal volumes fall back to annotation order.
    """
    pts = as_points(points)
    labels = np.full(len(pts), NO_OBJECT, dtype=np.int64)
    assigned = np.zeros(len(pts), dtype=bool)
    for box, cls in annotations:
        if int(cls) == NO_OBJECT:
            raise ValueError("annotations must not carry the NoObject class")
        if not all(d > 0 for d in box.dims):
            raise ValueError(f"box dims must be strictly positive, got {box.dims}")
    order = sorted(range(len(annotations)), key=lambda i: (annotations[i][0].volume, i))
    for i in order:
        box, cls = annotations[i]
        hit = box.contains(pts[:, :3]) & ~assigned
        labels[hit] = int(cls)
        assigned |= hit
    return LabeledCloud(pts, labels, scene_id)


def frontal_filter(cloud: LabeledCloud) -> LabeledCloud:
    """Keep the forward half-space, x > 0."""
    return cloud.select(cloud.points[:, 0] > 0)


def ground_filter(cloud: LabeledCloud, z_min: float) -> LabeledCloud:
    """Keep points with z >= z_min; ``-inf`` disables the filter."""
    if math.isnan(z_min):
        raise ValueError("z_min must not be NaN")
    return cloud.select(cloud.points[:, 2] >= z_min)
