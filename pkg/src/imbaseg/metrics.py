"""Confusion counts and per-class IoU = TP / (TP + FN + FP).

A class with no ground-truth and no predicted points has no IoU; it is
represented by ``None`` and rendered as ``N/A``.
"""
from __future__ import annotations

import csv
import io
from typing import Iterable, Sequence

import numpy as np

from .geom import ClassCatalog


def empty_confusion(n_classes: int) -> np.ndarray:
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, gt, pred) -> np.ndarray:
    """Return ``cm`` plus the (truth, prediction) pair counts; rows are truth."""
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if len(gt) != len(pred):
        raise ValueError(f"{len(gt)} ground-truth labels but {len(pred)} predictions")
    n = cm.shape[0]
    if len(gt) and (min(gt.min(), pred.min()) < 0 or max(gt.max(), pred.max()) >= n):
        raise ValueError(f"class index outside [0, {n})")
    counts = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    return cm + counts


def iou_per_class(cm: np.ndarray) -> list[float | None]:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    out: list[float | None] = []
    for t, n, p in zip(tp.tolist(), fn.tolist(), fp.tolist()):
        denom = t + n + p
        out.append(None if denom == 0 else t / denom)
    return out


def mean_iou(ious: Sequence[float | None], include: Iterable[int]) -> float | None:
    include = sorted(set(include))
    if not include:
        raise ValueError("mean IoU needs at least one class")
    vals = [ious[i] for i in include if ious[i] is not None]
    if not vals:
        return None
    return sum(vals) / len(vals)


def fmt_iou(v: float | None) -> str:
    return "N/A" if v is None else f"{v:.4f}"


def confusion_csv(cm: np.ndarray, catalog: ClassCatalog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\pred", *catalog])
    for name, row in zip(catalog, np.asarray(cm).tolist()):
        w.writerow([name, *row])
    return buf.getvalue()


def iou_rows(cm: np.ndarray, catalog: ClassCatalog) -> list[tuple[str, float | None]]:
    ious = iou_per_class(cm)
    rows = list(zip(catalog, ious))
    rows.append(("mean (objects)", mean_iou(ious, catalog.object_ids)))
    rows.append(("mean (all)", mean_iou(ious, range(len(catalog)))))
    return rows


def iou_csv(cm: np.ndarray, catalog: ClassCatalog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou"])
    for name, v in iou_rows(cm, catalog):
        w.writerow([name, fmt_iou(v)])
    return buf.getvalue()


def iou_table(cm: np.ndarray, catalog: ClassCatalog) -> str:
    rows = iou_rows(cm, catalog)
    width = max(len(n) for n, _ in rows)
    lines = [f"{'class':<{width}}  {'IoU':>6}"]
    lines += [f"{n:<{width}}  {fmt_iou(v):>6}" for n, v in rows]
    return "\n".join(lines) + "\n"


def read_iou_csv(text: str) -> dict[str, float | None]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["class", "iou"]:
        raise ValueError("not an IoU table")
    return {name: (None if v == "N/A" else float(v)) for name, v in rows[1:]}
