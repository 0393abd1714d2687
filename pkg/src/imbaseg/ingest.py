"""KITTI-format readers, the synthetic scene generator and dataset statistics."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import LengthError, MissingKeyError, NonRigidError, ParseError, SpecError
from .geom import NO_OBJECT, ClassCatalog, LabeledCloud, OrientedBox3, normalize_yaw

SCAN_RECORD = np.dtype("<f4")
RECORD_BYTES = 16


# --------------------------------------------------------------------------- scans


def read_point_scan(data: bytes) -> np.ndarray:
    """Decode consecutive little-endian float32 ``(x, y, z, intensity)`` records."""
    data = bytes(data)
    if len(data) % RECORD_BYTES:
        raise LengthError(f"scan length {len(data)} is not a multiple of {RECORD_BYTES}")
    raw = np.frombuffer(data, dtype=SCAN_RECORD).reshape(-1, 4)
    if not np.all(np.isfinite(raw)):
        bad = int(np.argwhere(~np.isfinite(raw))[0, 0])
        raise ValueError(f"non-finite value in scan record {bad}")
    return raw.astype(np.float64)


def write_point_scan(points) -> bytes:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"expected (P, 4) points, got {pts.shape}")
    out = pts.astype(SCAN_RECORD)
    if not np.all(np.isfinite(out)):
        raise ValueError("points are not finite in float32")
    return out.tobytes()


# ------------------------------------------------------------------------- labels


@dataclass(frozen=True)
class CameraBox:
    """One KITTI label line: camera frame, bottom-center location, y axis down."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    h: float
    w: float
    l: float
    location: tuple[float, float, float]
    rotation_y: float


def read_labels(text: str, catalog: ClassCatalog) -> list[tuple[CameraBox, int]]:
    """Parse 15-field KITTI label lines, skipping types absent from ``catalog``."""
    out, _ = read_labels_counted(text, catalog)
    return out


def read_labels_counted(text: str, catalog: ClassCatalog) -> tuple[list[tuple[CameraBox, int]], int]:
    """Like :func:`read_labels` but also return the number of skipped lines."""
    out = []
    skipped = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 15:
            raise ParseError(f"expected 15 fields, got {len(fields)}", line=lineno)
        try:
            nums = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"malformed numeric field ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in nums):
            raise ParseError("non-finite numeric field", line=lineno)
        name = fields[0]
        if name not in catalog or catalog.index(name) == NO_OBJECT:
            skipped += 1
            continue
        box = CameraBox(
            type=name,
            truncated=nums[0],
            occluded=int(nums[1]),
            alpha=nums[2],
            bbox=tuple(nums[3:7]),
            h=nums[7],
            w=nums[8],
            l=nums[9],
            location=tuple(nums[10:13]),
            rotation_y=nums[13],
        )
        out.append((box, catalog.index(name)))
    return out, skipped


# -------------------------------------------------------------------- calibration


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p' = R @ p + t``; constructing validates R as a proper rotation."""

    rotation: np.ndarray
    translation: np.ndarray
    tol: float = field(default=1e-6, repr=False)

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise NonRigidError("transform has non-finite entries")
        orth = np.max(np.abs(r @ r.T - np.eye(3)))
        det = np.linalg.det(r)
        if orth > self.tol or abs(det - 1.0) > self.tol:
            raise NonRigidError(f"rotation not orthonormal: |RR^T - I| = {orth:.3g}, det = {det:.6g}")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, xyz) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


_CALIB_LINE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*:(.*)$")


def read_calibration(text: str, key: str = "Tr_velo_to_cam") -> RigidTransform:
    """Read the sensor-to-camera rigid transform from a KITTI calibration file."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _CALIB_LINE.match(line)
        if not m or m.group(1) != key:
            continue
        parts = m.group(2).split()
        if len(parts) != 12:
            raise ParseError(f"{key} needs 12 numbers, got {len(parts)}", line=lineno)
        try:
            vals = np.array([float(v) for v in parts]).reshape(3, 4)
        except ValueError as exc:
            raise ParseError(f"malformed number in {key} ({exc})", line=lineno) from None
        rot, trans = vals[:, :3], vals[:, 3]
        # Calibration files carry ~7 significant digits; accept 1e-4 and
        # snap to the nearest rotation when the residual is above 1e-6.
        RigidTransform(rot, trans, tol=1e-4)
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        return RigidTransform(rot, trans)
    raise MissingKeyError(f"calibration has no '{key}:' line")


def box_to_sensor_frame(box: CameraBox, calib: RigidTransform) -> OrientedBox3:
    """Map a camera-frame label box into the sensor frame.

    ``calib`` is the sensor-to-camera transform. The bottom-center location is
    lifted by h/2 along camera up (-y) before mapping. For the nominal KITTI
    axis permutation yaw is ``-rotation_y - pi/2``; any extra rotation of the
    calibration about the vertical is carried over from its forward axis.
    """
    inv = calib.inverse()
    loc = np.asarray(box.location, dtype=np.float64)
    center_cam = loc - np.array([0.0, box.h / 2.0, 0.0])
    center = inv.apply(center_cam)
    forward = inv.rotation @ np.array([0.0, 0.0, 1.0])
    offset = math.atan2(forward[1], forward[0]) if abs(forward[0]) + abs(forward[1]) > 0 else 0.0
    yaw = normalize_yaw(-box.rotation_y - math.pi / 2.0 + offset)
    return OrientedBox3(tuple(center), (box.l, box.w, box.h), yaw)


def sensor_box_to_camera(box: OrientedBox3, calib: RigidTransform, type_name: str = "Car") -> CameraBox:
    """Inverse of :func:`box_to_sensor_frame`."""
    center_cam = calib.apply(np.asarray(box.center))
    length, width, height = box.dims
    loc = center_cam + np.array([0.0, height / 2.0, 0.0])
    forward = calib.inverse().rotation @ np.array([0.0, 0.0, 1.0])
    offset = math.atan2(forward[1], forward[0]) if abs(forward[0]) + abs(forward[1]) > 0 else 0.0
    rotation_y = normalize_yaw(-box.yaw - math.pi / 2.0 + offset)
    return CameraBox(type_name, 0.0, 0, 0.0, (0.0, 0.0, 0.0, 0.0), height, width, length, tuple(loc), rotation_y)


def camera_box_corners(box: CameraBox) -> np.ndarray:
    """The 8 corners of a label box in the camera frame (KITTI convention)."""
    xs = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * box.l / 2.0
    ys = np.array([0, 0, -1, -1, 0, 0, -1, -1]) * box.h
    zs = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * box.w / 2.0
    c, s = math.cos(box.rotation_y), math.sin(box.rotation_y)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return np.stack([xs, ys, zs], axis=1) @ rot.T + np.asarray(box.location)


# ---------------------------------------------------------------------- synthetic


def _range(value, name, *, integer=False, lo_bound=0.0, hi_bound=math.inf):
    lo, hi = value
    if integer and (int(lo) != lo or int(hi) != hi):
        raise SpecError(f"{name} bounds must be integers, got {value}")
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise SpecError(f"{name} bounds must be finite, got {value}")
    if lo > hi:
        raise SpecError(f"{name} range is empty: {value}")
    if lo < lo_bound or hi > hi_bound:
        raise SpecError(f"{name} range {value} outside [{lo_bound}, {hi_bound}]")
    return (int(lo), int(hi)) if integer else (float(lo), float(hi))


@dataclass(frozen=True)
class ClassSceneSpec:
    instances: tuple[int, int]
    points_per_instance: tuple[int, int]
    length: tuple[float, float]
    width: tuple[float, float]
    height: tuple[float, float]
    intensity: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "instances", _range(self.instances, "instances", integer=True))
        object.__setattr__(
            self, "points_per_instance", _range(self.points_per_instance, "points_per_instance", integer=True)
        )
        for name in ("length", "width", "height"):
            r = _range(getattr(self, name), name)
            if r[0] <= 0:
                raise SpecError(f"{name} must be strictly positive, got {r}")
            object.__setattr__(self, name, r)
        object.__setattr__(self, "intensity", _range(self.intensity, "intensity", hi_bound=1.0))


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Scene recipe: per-class instance/point/size ranges plus a ground-level background.

    ``extent`` is the half-width of the square scene footprint in meters.
    Background points lie at ``ground_z`` plus Gaussian noise of std ``noise``.
    """

    classes: tuple[tuple[str, ClassSceneSpec], ...]
    background_points: int = 4000
    extent: float = 40.0
    noise: float = 0.05
    ground_z: float = -1.73
    background_intensity: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        classes = self.classes.items() if isinstance(self.classes, Mapping) else self.classes
        classes = tuple((str(n), s if isinstance(s, ClassSceneSpec) else ClassSceneSpec(**s)) for n, s in classes)
        if len({n for n, _ in classes}) != len(classes):
            raise SpecError("duplicate class in synthetic spec")
        object.__setattr__(self, "classes", classes)
        if int(self.background_points) != self.background_points or self.background_points < 0:
            raise SpecError(f"background_points must be a non-negative integer, got {self.background_points}")
        object.__setattr__(self, "background_points", int(self.background_points))
        if not (math.isfinite(self.extent) and self.extent > 0):
            raise SpecError(f"extent must be positive, got {self.extent}")
        if not (math.isfinite(self.noise) and self.noise >= 0):
            raise SpecError(f"noise must be non-negative, got {self.noise}")
        if not math.isfinite(self.ground_z):
            raise SpecError("ground_z must be finite")
        object.__setattr__(
            self, "background_intensity", _range(self.background_intensity, "background_intensity", hi_bound=1.0)
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSceneSpec":
        d = dict(d)
        try:
            classes = {name: ClassSceneSpec(**{k: tuple(v) for k, v in c.items()}) for name, c in d.pop("classes").items()}
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed synthetic spec: {exc}") from None
        if "background_intensity" in d:
            d["background_intensity"] = tuple(d["background_intensity"])
        try:
            return cls(classes=tuple(classes.items()), **d)
        except TypeError as exc:
            raise SpecError(f"malformed synthetic spec: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "classes": {
                n: {
                    "instances": list(s.instances),
                    "points_per_instance": list(s.points_per_instance),
                    "length": list(s.length),
                    "width": list(s.width),
                    "height": list(s.height),
                    "intensity": list(s.intensity),
                }
                for n, s in self.classes
            },
            "background_points": self.background_points,
            "extent": self.extent,
            "noise": self.noise,
            "ground_z": self.ground_z,
            "background_intensity": list(self.background_intensity),
        }


MAX_PLACEMENT_TRIES = 1000


def generate_synthetic_scene(
    spec: SyntheticSceneSpec, seed: int, catalog: ClassCatalog | None = None
) -> tuple[np.ndarray, list[tuple[OrientedBox3, int]]]:
    """Draw one scene; a pure function of ``(spec, seed)``.

    Uses numpy's PCG64 bit generator seeded with ``seed``. Classes are drawn
    in spec order: instance count, then per instance the box dims, yaw,
    footprint position (rejection-sampled so footprints never overlap), point
    count, box-interior points and intensities. Background points follow.
    Coordinates are rounded to float32 so the scene survives the scan format
    bit-exactly.
    """
    catalog = catalog or ClassCatalog()
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    placed: list[tuple[float, float, float]] = []
    annotations = []
    chunks = []
    for name, cs in spec.classes:
        if name not in catalog or catalog.index(name) == NO_OBJECT:
            raise SpecError(f"synthetic class {name!r} is not an object class of the catalog")
        cls_id = catalog.index(name)
        n_inst = int(rng.integers(cs.instances[0], cs.instances[1] + 1))
        for _ in range(n_inst):
            length = rng.uniform(*cs.length)
            width = rng.uniform(*cs.width)
            height = rng.uniform(*cs.height)
            yaw = rng.uniform(-math.pi, math.pi)
            radius = 0.5 * math.hypot(length, width)
            if radius >= spec.extent:
                raise SpecError(f"{name} boxes do not fit in extent {spec.extent}")
            for _try in range(MAX_PLACEMENT_TRIES):
                cx, cy = rng.uniform(-spec.extent + radius, spec.extent - radius, size=2)
                if all(math.hypot(cx - px, cy - py) > radius + pr for px, py, pr in placed):
                    break
            else:
                raise SpecError(f"could not place {name} instance without overlap; extent too small")
            placed.append((cx, cy, radius))
            box = OrientedBox3((cx, cy, spec.ground_z + height / 2.0), (length, width, height), yaw)
            annotations.append((box, cls_id))
            n_pts = int(rng.integers(cs.points_per_instance[0], cs.points_per_instance[1] + 1))
            # a 1 mm inset keeps float32 rounding from pushing points outside
            half = np.array([length, width, height]) / 2.0 - 1e-3
            local = rng.uniform(-1.0, 1.0, size=(n_pts, 3)) * np.maximum(half, 0.0)
            xyz = box.center + local @ _yaw_matrix(box.yaw).T
            inten = rng.uniform(*cs.intensity, size=(n_pts, 1))
            chunks.append(np.concatenate([xyz, inten], axis=1))
    nb = spec.background_points
    bg = np.empty((nb, 4))
    bg[:, :2] = rng.uniform(-spec.extent, spec.extent, size=(nb, 2))
    bg[:, 2] = spec.ground_z + rng.normal(0.0, spec.noise, size=nb) if spec.noise > 0 else spec.ground_z
    bg[:, 3] = rng.uniform(*spec.background_intensity, size=nb)
    chunks.append(bg)
    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))
    points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)
    points = points.astype(np.float32).astype(np.float64)
    return points, annotations


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def scene_seed(root_seed: int, index: int) -> int:
    """Per-scene seed for multi-scene datasets, derived with numpy's SeedSequence."""
    return int(np.random.SeedSequence([int(root_seed), int(index)]).generate_state(1, np.uint64)[0])


# -------------------------------------------------------------------------- stats


@dataclass(frozen=True)
class DatasetStats:
    point_counts: tuple[int, ...]
    instance_counts: tuple[int, ...]

    def __post_init__(self):
        pc = tuple(int(c) for c in self.point_counts)
        ic = tuple(int(c) for c in self.instance_counts)
        if len(pc) != len(ic):
            raise ValueError("point and instance count vectors differ in length")
        if any(c < 0 for c in pc + ic):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "point_counts", pc)
        object.__setattr__(self, "instance_counts", ic)

    @property
    def total_points(self) -> int:
        return sum(self.point_counts)

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        if len(self.point_counts) != len(other.point_counts):
            raise ValueError("cannot add stats over different catalogs")
        return DatasetStats(
            tuple(a + b for a, b in zip(self.point_counts, other.point_counts)),
            tuple(a + b for a, b in zip(self.instance_counts, other.instance_counts)),
        )


def compute_stats(
    dataset: Iterable[LabeledCloud],
    catalog: ClassCatalog,
    annotations: Sequence[Sequence[tuple[object, int]]] | None = None,
) -> DatasetStats:
    n = len(catalog)
    points = np.zeros(n, dtype=np.int64)
    for cloud in dataset:
        cloud.validate(catalog)
        points += np.bincount(cloud.labels, minlength=n)
    instances = np.zeros(n, dtype=np.int64)
    for scene in annotations or ():
        for _box, cls in scene:
            instances[int(cls)] += 1
    return DatasetStats(tuple(points.tolist()), tuple(instances.tolist()))
