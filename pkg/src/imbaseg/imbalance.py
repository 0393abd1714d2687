"""Per-class loss weights from point frequencies, ``w = 1 / ln(1 + f + eps)``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, EmptyDatasetError, ParseError
from .geom import ClassCatalog
from .ingest import DatasetStats

DEFAULT_EPSILON = 1e-4

# Published KITTI weights, usable verbatim as a weight table.
KITTI_REFERENCE_WEIGHTS = {
    "NoObject": 1.469,
    "Car": 16.306,
    "Truck": 16.306,
    "Van": 16.306,
    "Pedestrian": 48.749,
    "Cyclist": 48.604,
}


@dataclass(frozen=True, eq=False)
class ClassWeights:
    weights: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DomainError(f"class weights must be positive and finite, got {w}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i):
        return self.weights[i]

    @classmethod
    def uniform(cls, n: int) -> "ClassWeights":
        return cls(np.ones(n), epsilon=0.0)

    @classmethod
    def from_table(cls, table: Mapping[str, float], catalog: ClassCatalog) -> "ClassWeights":
        missing = [n for n in catalog if n not in table]
        if missing:
            raise DomainError(f"weight table lacks classes {missing}")
        extra = [n for n in table if n not in catalog]
        if extra:
            raise DomainError(f"weight table names unknown classes {extra}")
        return cls(np.array([table[n] for n in catalog]), epsilon=0.0)


def class_frequencies(stats: DatasetStats) -> np.ndarray:
    total = stats.total_points
    if total <= 0:
        raise EmptyDatasetError("dataset has no points; class frequencies undefined")
    return np.array(stats.point_counts, dtype=np.float64) / total


def class_weights(freqs: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> ClassWeights:
    f = np.asarray(freqs, dtype=np.float64)
    if not epsilon > 0 or not math.isfinite(epsilon):
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if np.any(~np.isfinite(f)) or np.any(f < 0) or np.any(f > 1):
        raise DomainError(f"frequencies must lie in [0, 1], got {f}")
    return ClassWeights(1.0 / np.log1p(f + epsilon), epsilon=epsilon)


def implied_frequency(weight: float, epsilon: float = 0.0) -> float:
    """Frequency that :func:`class_weights` maps to ``weight``."""
    if not weight > 0:
        raise DomainError(f"weight must be positive, got {weight}")
    return math.expm1(1.0 / weight) - epsilon


def weight_bounds(epsilon: float) -> tuple[float, float]:
    """Range of weights reachable for f in [0, 1]."""
    return 1.0 / math.log1p(1.0 + epsilon), 1.0 / math.log1p(epsilon)


def format_weight_table(weights: ClassWeights, catalog: ClassCatalog) -> str:
    if len(weights) != len(catalog):
        raise DomainError("weights and catalog differ in length")
    width = max(len("Class"), *(len(n) for n in catalog))
    lines = [f"{'Class':<{width}}  Weight"]
    lines += [f"{name:<{width}}  {w:.6g}" for name, w in zip(catalog, weights.weights)]
    return "\n".join(lines) + "\n"


def parse_weight_table(text: str) -> dict[str, float]:
    """Read the two-column ``class weight`` table written by :func:`format_weight_table`."""
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or line.lstrip().startswith("#"):
            continue
        if parts == ["Class", "Weight"]:
            continue
        if len(parts) != 2:
            raise ParseError(f"expected 'class weight', got {line!r}", line=lineno)
        try:
            table[parts[0]] = float(parts[1])
        except ValueError:
            raise ParseError(f"malformed weight {parts[1]!r}", line=lineno) from None
    return table
