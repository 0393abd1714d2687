"""Self-incremental training: rare classes first, dominant classes added phase by phase.

Every phase continues from the previous phase's checkpoint; classes not yet
active are folded into NoObject. The output head always spans the full
catalog so the same model is trained throughout.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, NonFiniteGradientError
from .geom import NO_OBJECT, ClassCatalog, LabeledCloud
from .imbalance import DEFAULT_EPSILON, ClassWeights, class_frequencies, class_weights
from .ingest import compute_stats
from .loss import loss_and_grad
from .metrics import accumulate, empty_confusion, iou_per_class, mean_iou
from .net import (
    Architecture,
    Checkpoint,
    ModelParams,
    Provenance,
    backward,
    checkpoint_checksum,
    forward,
    init_params,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[frozenset[int], ...]

    def __post_init__(self):
        phases = tuple(frozenset(int(c) for c in p) for p in self.phases)
        if not phases:
            raise ConfigError("a phase plan needs at least one phase")
        seen: set[int] = set()
        for k, p in enumerate(phases, start=1):
            if not p:
                raise ConfigError(f"phase {k} is empty")
            if NO_OBJECT in p:
                raise ConfigError("NoObject cannot be scheduled in a phase")
            if p & seen:
                raise ConfigError(f"phase {k} repeats classes {sorted(p & seen)}")
            seen |= p
        object.__setattr__(self, "phases", phases)

    def __len__(self):
        return len(self.phases)

    def validate(self, catalog: ClassCatalog) -> None:
        scheduled = frozenset().union(*self.phases)
        if scheduled != catalog.object_ids:
            missing = sorted(catalog.names[i] for i in catalog.object_ids - scheduled)
            unknown = sorted(scheduled - catalog.object_ids)
            raise ConfigError(f"plan must cover every object class once (missing {missing}, unknown ids {unknown})")

    def cumulative(self, k: int) -> frozenset[int]:
        """Active set of phase ``k`` (0-based)."""
        return frozenset().union(*self.phases[: k + 1])

    @classmethod
    def from_names(cls, phases: Iterable[Iterable[str]], catalog: ClassCatalog) -> "PhasePlan":
        try:
            return cls(tuple(catalog.ids(p) for p in phases))
        except KeyError as exc:
            raise ConfigError(f"phase plan names an unknown class: {exc}") from None

    @classmethod
    def single_phase(cls, catalog: ClassCatalog) -> "PhasePlan":
        return cls((catalog.object_ids,))

    @classmethod
    def default(cls, catalog: ClassCatalog) -> "PhasePlan":
        return cls.from_names([["Pedestrian", "Cyclist"], ["Car"], ["Truck", "Van"]], catalog)

    def names(self, catalog: ClassCatalog) -> list[list[str]]:
        return [[catalog.names[i] for i in sorted(p)] for p in self.phases]


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    weighted: bool = False
    patience: int = 0  # 0 disables early stopping
    val_fraction: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid adam hyperparameters")


@dataclass(frozen=True, eq=False)
class OptimizerState:
    step: int = 0
    m: tuple[np.ndarray, ...] | None = None
    v: tuple[np.ndarray, ...] | None = None


def optimizer_step(
    params: ModelParams, grads: Sequence[np.ndarray], state: OptimizerState, config: TrainConfig
) -> tuple[ModelParams, OptimizerState]:
    if len(grads) != len(params.arrays):
        raise ValueError("gradient list does not match parameters")
    for p, g in zip(params.arrays, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; aborting training")
    lr = config.lr
    if config.optimizer == "sgd":
        new = tuple((p.astype(np.float64) - lr * g).astype(p.dtype) for p, g in zip(params.arrays, grads))
        return ModelParams(params.arch, new), OptimizerState(state.step + 1)

    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    m_prev = state.m or tuple(np.zeros(p.shape) for p in params.arrays)
    v_prev = state.v or tuple(np.zeros(p.shape) for p in params.arrays)
    m = tuple(b1 * mp + (1 - b1) * g for mp, g in zip(m_prev, grads))
    v = tuple(b2 * vp + (1 - b2) * np.square(g) for vp, g in zip(v_prev, grads))
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = tuple(
        (p.astype(np.float64) - lr * (mi / c1) / (np.sqrt(vi / c2) + config.adam_eps)).astype(p.dtype)
        for p, mi, vi in zip(params.arrays, m, v)
    )
    return ModelParams(params.arch, new), OptimizerState(t, m, v)


def remap_labels(cloud: LabeledCloud, active: Iterable[int]) -> LabeledCloud:
    """Fold every class outside ``active`` into NoObject."""
    keep = np.zeros(max(int(cloud.labels.max(initial=0)), *active, 0) + 1, dtype=bool)
    keep[list(active)] = True
    keep[NO_OBJECT] = True
    labels = np.where(keep[cloud.labels], cloud.labels, NO_OBJECT)
    return cloud.with_labels(labels)


def split_dataset(dataset: Sequence, val_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic train/validation split of whole scenes."""
    n = len(dataset)
    n_val = int(val_fraction * n)
    if val_fraction > 0 and n_val == 0 and n >= 2:
        n_val = 1
    n_val = min(n_val, n - 1) if n else 0
    if n_val <= 0:
        return list(dataset), []
    perm = np.random.default_rng([int(seed), 0]).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [d for i, d in enumerate(dataset) if i not in val_idx]
    val = [d for i, d in enumerate(dataset) if i in val_idx]
    return train, val


def tree_sum(items: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Pairwise reduction in a fixed order, independent of how items were computed."""
    level = [list(x) for x in items]
    while len(level) > 1:
        nxt = [[a + b for a, b in zip(level[i], level[i + 1])] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(params: ModelParams, clouds: Sequence[LabeledCloud], threads: int = 1) -> np.ndarray:
    """Confusion matrix of argmax predictions over all clouds."""
    n = params.arch.output_dim

    def one(cloud):
        cm = empty_confusion(n)
        if len(cloud) == 0:
            return cm
        return accumulate(cm, cloud.labels, np.argmax(forward(params, cloud.points), axis=1))

    cm = empty_confusion(n)
    for part in _map(one, list(clouds), threads):
        cm = cm + part
    return cm


@dataclass(eq=False)
class PhaseResult:
    phase_index: int
    checkpoint: Checkpoint
    active: frozenset[int]
    loss_curve: list[float] = field(default_factory=list)
    val_score_curve: list[float | None] = field(default_factory=list)
    val_iou: list[float | None] | None = None
    epochs_run: int = 0
    best_epoch: int = 0
    checksum: int = 0


def run_phase(
    start: Checkpoint | None,
    dataset: Sequence[LabeledCloud],
    active: Iterable[int],
    weights: ClassWeights | None,
    config: TrainConfig,
    *,
    arch: Architecture | None = None,
    catalog: ClassCatalog | None = None,
    phase_index: int = 1,
    validation: Sequence[LabeledCloud] | None = None,
) -> PhaseResult:
    """Train one phase on labels remapped to ``active`` and return the best checkpoint.

    With a validation set and ``patience > 0`` training stops once the
    validation mean IoU over active classes has not improved for ``patience``
    epochs; otherwise all epochs run. The returned checkpoint is the one with
    the best validation score (the last one when there is no validation set).
    """
    active = frozenset(int(c) for c in active)
    if start is None:
        if arch is None or catalog is None:
            raise ConfigError("a fresh phase needs an architecture and a catalog")
        params = init_params(arch, config.seed)
        parent = 0
    else:
        params, catalog = start.params, start.catalog
        parent = checkpoint_checksum(start)
    if params.arch.output_dim != len(catalog):
        raise ConfigError("checkpoint output size does not match the catalog")
    if not dataset:
        raise EmptyDatasetError("phase has no training scenes")
    if validation is None:
        train, validation = split_dataset(dataset, config.val_fraction, config.seed)
    else:
        train = list(dataset)
    if not train:
        raise EmptyDatasetError("phase has no training scenes")
    if config.weighted and weights is None:
        raise ConfigError("weighted training needs class weights")
    w = weights.weights if config.weighted else None
    if w is not None and len(w) != len(catalog):
        raise ConfigError("weight vector does not match the catalog")

    train = [remap_labels(c, active) for c in train if len(c)]
    val = [remap_labels(c, active) for c in validation]
    if not train:
        raise EmptyDatasetError("every training scene is empty")

    def scene_step(p: ModelParams):
        def fn(cloud: LabeledCloud):
            logits, cache = forward(p, cloud.points, return_cache=True)
            loss, dlogits = loss_and_grad(logits, cloud.labels, w)
            return loss, backward(p, cloud.points, dlogits, cache)

        return fn

    state = OptimizerState()
    best_params, best_epoch, best_score, best_iou = params, 0, None, None
    losses: list[float] = []
    scores: list[float | None] = []
    stale = 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([int(config.seed), epoch]).permutation(len(train))
        epoch_losses = []
        for b in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[b : b + config.batch_size]]
            out = _map(scene_step(params), batch, config.threads)
            grads = [g / len(batch) for g in tree_sum([g for _, g in out])]
            params, state = optimizer_step(params, grads, state, config)
            epoch_losses += [l for l, _ in out]
        losses.append(float(np.mean(epoch_losses)))

        if val:
            ious = iou_per_class(evaluate(params, val, config.threads))
            score = mean_iou(ious, active)
            scores.append(score)
            if score is not None and (best_score is None or score > best_score):
                best_params, best_epoch, best_score, best_iou = params, epoch, score, ious
                stale = 0
            else:
                stale += 1
            log.info("phase %d epoch %d loss %.5f val mIoU %s", phase_index, epoch, losses[-1], score)
            if config.patience and stale >= config.patience:
                break
        else:
            log.info("phase %d epoch %d loss %.5f", phase_index, epoch, losses[-1])
    if not val or best_score is None:
        best_params, best_epoch = params, epoch
        best_iou = iou_per_class(evaluate(params, val, config.threads)) if val else None

    ckpt = Checkpoint(best_params, catalog, Provenance(phase_index, best_epoch, int(config.seed), parent))
    return PhaseResult(
        phase_index=phase_index,
        checkpoint=ckpt,
        active=active,
        loss_curve=losses,
        val_score_curve=scores,
        val_iou=best_iou,
        epochs_run=epoch,
        best_epoch=best_epoch,
        checksum=checkpoint_checksum(ckpt),
    )


def dataset_weights(dataset: Sequence[LabeledCloud], catalog: ClassCatalog, epsilon: float = DEFAULT_EPSILON) -> ClassWeights:
    return class_weights(class_frequencies(compute_stats(dataset, catalog)), epsilon)


def run_curriculum(
    plan: PhasePlan,
    dataset: Sequence[LabeledCloud],
    config: TrainConfig,
    *,
    arch: Architecture,
    catalog: ClassCatalog,
    weights: ClassWeights | None = None,
    epsilon: float = DEFAULT_EPSILON,
    on_phase_end: Callable[[PhaseResult], None] | None = None,
) -> tuple[Checkpoint, list[PhaseResult]]:
    """Run every phase of ``plan``, each starting from the previous phase's checkpoint.

    Class weights, when training is weighted and none are supplied, are
    computed once from the full dataset over all classes and reused in every
    phase. If a phase fails, the exception carries the finished phases in
    ``completed_phases``.
    """
    plan.validate(catalog)
    if not dataset:
        raise EmptyDatasetError("curriculum has no scenes")
    if config.weighted and weights is None:
        weights = dataset_weights(dataset, catalog, epsilon)
    train, val = split_dataset(dataset, config.val_fraction, config.seed)
    results: list[PhaseResult] = []
    ckpt: Checkpoint | None = None
    for k in range(len(plan)):
        try:
            result = run_phase(
                ckpt,
                train,
                plan.cumulative(k),
                weights,
                config,
                arch=arch,
                catalog=catalog,
                phase_index=k + 1,
                validation=val,
            )
        except Exception as exc:
            exc.completed_phases = list(results)  # type: ignore[attr-defined]
            raise
        results.append(result)
        ckpt = result.checkpoint
        if on_phase_end is not None:
            on_phase_end(result)
    assert ckpt is not None
    return ckpt, results
