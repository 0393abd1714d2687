"""Scene collections on disk and in memory, and the labeling/filtering pipeline.

Two directory layouts are understood:

* KITTI object layout: ``velodyne/<id>.bin``, ``label_2/<id>.txt``,
  ``calib/<id>.txt``.
* Synthetic layout written by :func:`write_synthetic_dataset`:
  ``manifest.json`` plus ``scenes/<id>.bin`` (scan records) and
  ``scenes/<id>.txt`` (one sensor-frame box per line:
  ``class cx cy cz length width height yaw``).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, EmptyDatasetError, ParseError
from .geom import ClassCatalog, LabeledCloud, OrientedBox3, frontal_filter, ground_filter, label_points
from .ingest import (
    SyntheticSceneSpec,
    box_to_sensor_frame,
    generate_synthetic_scene,
    read_calibration,
    read_labels_counted,
    read_point_scan,
    scene_seed,
    write_point_scan,
)
from .net import atomic_write_bytes, atomic_write_text

MANIFEST = "manifest.json"
DEFAULT_Z_MIN = -1.4


@dataclass(eq=False)
class RawScene:
    scene_id: str
    points: np.ndarray
    annotations: list[tuple[OrientedBox3, int]]
    skipped_labels: int = 0


@dataclass(frozen=True)
class Preprocess:
    frontal: bool = True
    z_min: float = DEFAULT_Z_MIN  # -inf disables the ground filter


def prepare(scenes: Sequence[RawScene], pre: Preprocess = Preprocess()) -> list[LabeledCloud]:
    """Label points from boxes, then apply the frontal and ground filters.

    Labeling is per point, so filtering before or after gives the same clouds.
    """
    out = []
    for s in scenes:
        cloud = label_points(s.points, s.annotations, s.scene_id)
        if pre.frontal:
            cloud = frontal_filter(cloud)
        if pre.z_min > -math.inf:
            cloud = ground_filter(cloud, pre.z_min)
        out.append(cloud)
    return out


def generate_synthetic_dataset(
    spec: SyntheticSceneSpec, seed: int, n_scenes: int, catalog: ClassCatalog
) -> list[RawScene]:
    scenes = []
    for i in range(n_scenes):
        pts, ann = generate_synthetic_scene(spec, scene_seed(seed, i), catalog)
        scenes.append(RawScene(f"{i:06d}", pts, ann))
    return scenes


def format_annotations(annotations, catalog: ClassCatalog) -> str:
    lines = []
    for box, cls in annotations:
        vals = (*box.center, *box.dims, box.yaw)
        lines.append(" ".join([catalog.names[cls], *(repr(float(v)) for v in vals)]))
    return "".join(line + "\n" for line in lines)


def parse_annotations(text: str, catalog: ClassCatalog) -> list[tuple[OrientedBox3, int]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", line=lineno)
        if parts[0] not in catalog:
            raise ParseError(f"unknown class {parts[0]!r}", line=lineno)
        try:
            cx, cy, cz, length, width, height, yaw = (float(v) for v in parts[1:])
            box = OrientedBox3((cx, cy, cz), (length, width, height), yaw)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        out.append((box, catalog.index(parts[0])))
    return out


def write_synthetic_dataset(
    out_dir: str | Path, spec: SyntheticSceneSpec, seed: int, n_scenes: int, catalog: ClassCatalog
) -> list[RawScene]:
    """Generate and write a synthetic dataset; output bytes depend only on the arguments."""
    out = Path(out_dir)
    scenes = generate_synthetic_dataset(spec, seed, n_scenes, catalog)
    for s in scenes:
        atomic_write_bytes(out / "scenes" / f"{s.scene_id}.bin", write_point_scan(s.points))
        atomic_write_text(out / "scenes" / f"{s.scene_id}.txt", format_annotations(s.annotations, catalog))
    manifest = {
        "format": "imbaseg-synthetic",
        "version": 1,
        "catalog": list(catalog.names),
        "seed": int(seed),
        "scenes": [s.scene_id for s in scenes],
        "spec": spec.to_dict(),
    }
    atomic_write_text(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return scenes


def load_synthetic_dir(path: str | Path) -> tuple[ClassCatalog, list[RawScene]]:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        catalog = ClassCatalog(tuple(manifest["catalog"]))
        ids = manifest["scenes"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable manifest in {root}: {exc}") from None
    scenes = []
    for sid in ids:
        try:
            pts = read_point_scan((root / "scenes" / f"{sid}.bin").read_bytes())
            ann = parse_annotations((root / "scenes" / f"{sid}.txt").read_text(), catalog)
        except OSError as exc:
            raise DataError(f"scene {sid}: {exc}") from None
        scenes.append(RawScene(sid, pts, ann))
    return catalog, scenes


def load_kitti_dir(path: str | Path, catalog: ClassCatalog) -> list[RawScene]:
    root = Path(path)
    velo = root / "velodyne"
    if not velo.is_dir():
        raise DataError(f"{root} has no velodyne/ directory")
    scenes = []
    for scan_path in sorted(velo.glob("*.bin")):
        sid = scan_path.stem
        try:
            pts = read_point_scan(scan_path.read_bytes())
            label_text = (root / "label_2" / f"{sid}.txt").read_text()
            calib = read_calibration((root / "calib" / f"{sid}.txt").read_text())
        except OSError as exc:
            raise DataError(f"scene {sid}: {exc}") from None
        cam_boxes, skipped = read_labels_counted(label_text, catalog)
        ann = [(box_to_sensor_frame(b, calib), cls) for b, cls in cam_boxes]
        scenes.append(RawScene(sid, pts, ann, skipped))
    return scenes


def load_dataset_dir(path: str | Path, catalog: ClassCatalog) -> list[RawScene]:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    if (root / MANIFEST).exists():
        file_catalog, scenes = load_synthetic_dir(root)
        if file_catalog != catalog:
            raise DataError(f"dataset catalog {file_catalog.names} differs from configured {catalog.names}")
        return scenes
    return load_kitti_dir(root, catalog)


def require_points(clouds: Sequence[LabeledCloud]) -> None:
    if not clouds or sum(len(c) for c in clouds) == 0:
        raise EmptyDatasetError("dataset contains no points")


def dataset_digest(clouds: Sequence[LabeledCloud]) -> str:
    """Content hash identifying an evaluation set."""
    h = hashlib.sha256()
    for c in clouds:
        h.update(c.scene_id.encode())
        h.update(np.ascontiguousarray(c.points, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(c.labels, dtype="<i8").tobytes())
    return h.hexdigest()
