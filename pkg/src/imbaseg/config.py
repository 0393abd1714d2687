"""Experiment configuration: a TOML file plus command-line overrides.

Documented keys (all optional; defaults reproduce the synthetic benchmark)::

    mode = "weighted-incremental"   # baseline | weighted | incremental | weighted-incremental
    seed = 0
    out = "runs/example"
    threads = 1
    catalog = ["NoObject", "Car", "Truck", "Van", "Pedestrian", "Cyclist"]

    [data]
    source = "synthetic"            # or "dir"
    path = "data/train"             # dir source: training scenes
    eval_path = "data/val"          # dir source: evaluation scenes (default: path)
    train_scenes = 24               # synthetic source
    eval_scenes = 12
    eval_seed_offset = 1000003      # evaluation scenes use seed + offset
    [data.synthetic]                # SyntheticSceneSpec fields; default is the benchmark scene
    spec_file = "configs/spec.toml" # alternative to inline fields, relative to the config file

    [preprocess]
    frontal = true
    z_min = -1.4                    # -inf (or "none") disables the ground filter

    [model]
    encoder = [16, 32]
    decoder = [32]
    input_scale = [0.0333, 0.0333, 1.0, 1.0]

    [train]                         # TrainConfig fields, plus:
    epsilon = 1e-4
    weights_file = "table.txt"      # fixed class-weight table instead of dataset frequencies

    [curriculum]
    phases = [["Pedestrian", "Cyclist"], ["Car"], ["Truck", "Van"]]
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .benchmark import BENCHMARK_ARCH, BENCHMARK_SPEC, BENCHMARK_TRAIN, MODES
from .curriculum import PhasePlan, TrainConfig
from .datasets import Preprocess
from .errors import ConfigError
from .geom import KITTI_CLASSES, ClassCatalog
from .imbalance import DEFAULT_EPSILON
from .ingest import SyntheticSceneSpec
from .net import Architecture

DEFAULT_PHASES = (("Pedestrian", "Cyclist"), ("Car",), ("Truck", "Van"))


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    eval_path: str | None = None
    train_scenes: int = 24
    eval_scenes: int = 12
    eval_seed_offset: int = 1_000_003
    synthetic: SyntheticSceneSpec = BENCHMARK_SPEC

    def __post_init__(self):
        if self.source not in ("synthetic", "dir"):
            raise ConfigError(f"data.source must be 'synthetic' or 'dir', got {self.source!r}")
        if self.source == "dir" and not self.path:
            raise ConfigError("data.source = 'dir' needs data.path")
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ConfigError("scene counts must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "weighted-incremental"
    seed: int = 0
    out: str | None = None
    threads: int = 1
    catalog: ClassCatalog = field(default_factory=ClassCatalog)
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: Preprocess = Preprocess(frontal=True, z_min=-math.inf)
    arch: Architecture = BENCHMARK_ARCH
    train: TrainConfig = BENCHMARK_TRAIN
    epsilon: float = DEFAULT_EPSILON
    weights_file: str | None = None
    phases: tuple[tuple[str, ...], ...] = DEFAULT_PHASES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.arch.output_dim != len(self.catalog):
            raise ConfigError("model output size does not match the catalog")
        self.plan()  # validates phase names against the catalog

    @property
    def incremental(self) -> bool:
        return "incremental" in self.mode

    @property
    def weighted(self) -> bool:
        return self.mode.startswith("weighted")

    def plan(self) -> PhasePlan:
        """The degenerate single-phase plan for baseline/weighted, the configured phases otherwise."""
        if not self.incremental:
            return PhasePlan.single_phase(self.catalog)
        try:
            plan = PhasePlan.from_names(self.phases, self.catalog)
        except KeyError as exc:
            raise ConfigError(f"curriculum: {exc.args[0]}") from None
        plan.validate(self.catalog)
        return plan

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=int(self.seed), weighted=self.weighted, threads=self.threads)

    def to_dict(self) -> dict:
        """Everything that affects results; the output directory and thread count do not."""
        pre_z = self.preprocess.z_min
        return {
            "mode": self.mode,
            "seed": int(self.seed),
            "catalog": list(self.catalog.names),
            "data": {
                "source": self.data.source,
                "path": self.data.path,
                "eval_path": self.data.eval_path,
                "train_scenes": self.data.train_scenes,
                "eval_scenes": self.data.eval_scenes,
                "eval_seed_offset": self.data.eval_seed_offset,
                "synthetic": self.data.synthetic.to_dict(),
            },
            "preprocess": {"frontal": self.preprocess.frontal, "z_min": None if pre_z == -math.inf else pre_z},
            "model": {
                "encoder": list(self.arch.encoder),
                "decoder": list(self.arch.decoder),
                "input_scale": list(self.arch.input_scale),
            },
            "train": {
                **{f.name: getattr(self.train, f.name) for f in fields(TrainConfig) if f.name not in ("seed", "weighted", "threads")},
                "epsilon": self.epsilon,
                "weights_file": self.weights_file,
            },
            "curriculum": {"phases": [list(p) for p in self.phases]},
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        if self.weights_file:
            try:
                d["train"]["weights_file"] = hashlib.sha256(Path(self.weights_file).read_bytes()).hexdigest()
            except OSError:
                pass
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _table(d: Mapping, key: str) -> dict:
    v = d.get(key, {})
    if not isinstance(v, Mapping):
        raise ConfigError(f"[{key}] must be a table")
    return dict(v)


def _z_min(v: Any) -> float:
    if v is None or (isinstance(v, str) and v.lower() in ("none", "off", "-inf")):
        return -math.inf
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"preprocess.z_min must be a number, got {v!r}") from None


def load_spec_file(path: str | Path) -> SyntheticSceneSpec:
    """Read a synthetic scene spec from TOML (top level or under ``[synthetic]``)."""
    d = read_toml(path)
    return SyntheticSceneSpec.from_dict(d.get("synthetic", d))


def read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(d: Mapping, base_dir: Path = Path(".")) -> ExperimentConfig:
    d = dict(d)
    known = {"mode", "seed", "out", "threads", "catalog", "data", "preprocess", "model", "train", "curriculum"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    def rel(p):
        return None if p is None else str(base_dir / p)

    try:
        catalog = ClassCatalog(tuple(d.get("catalog", KITTI_CLASSES)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    data = _table(d, "data")
    synth = data.pop("synthetic", None)
    if synth is None:
        spec = BENCHMARK_SPEC
    elif "spec_file" in synth:
        spec = load_spec_file(base_dir / synth["spec_file"])
    else:
        spec = SyntheticSceneSpec.from_dict(synth)
    for key in ("path", "eval_path"):
        if key in data:
            data[key] = rel(data[key])
    try:
        data_cfg = DataConfig(synthetic=spec, **data)
    except TypeError as exc:
        raise ConfigError(f"[data]: {exc}") from None

    pre = _table(d, "preprocess")
    preprocess = Preprocess(frontal=bool(pre.pop("frontal", True)), z_min=_z_min(pre.pop("z_min", None)))
    if pre:
        raise ConfigError(f"unknown [preprocess] keys: {', '.join(sorted(pre))}")

    model = _table(d, "model")
    try:
        arch = Architecture(
            input_dim=4,
            encoder=tuple(model.pop("encoder", BENCHMARK_ARCH.encoder)),
            decoder=tuple(model.pop("decoder", BENCHMARK_ARCH.decoder)),
            output_dim=len(catalog),
            input_scale=tuple(model.pop("input_scale", BENCHMARK_ARCH.input_scale)),
        )
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None
    if model:
        raise ConfigError(f"unknown [model] keys: {', '.join(sorted(model))}")

    train = _table(d, "train")
    epsilon = float(train.pop("epsilon", DEFAULT_EPSILON))
    weights_file = rel(train.pop("weights_file", None))
    for key in ("seed", "weighted", "threads"):
        if key in train:
            raise ConfigError(f"train.{key} is set by the top-level config, not [train]")
    try:
        train_cfg = replace(BENCHMARK_TRAIN, **train)
    except TypeError as exc:
        raise ConfigError(f"[train]: {exc}") from None

    cur = _table(d, "curriculum")
    phases = tuple(tuple(p) for p in cur.pop("phases", DEFAULT_PHASES))
    if cur:
        raise ConfigError(f"unknown [curriculum] keys: {', '.join(sorted(cur))}")

    return ExperimentConfig(
        mode=d.get("mode", "weighted-incremental"),
        seed=int(d.get("seed", 0)),
        out=rel(d.get("out")) if d.get("out") else None,
        threads=int(d.get("threads", 1)),
        catalog=catalog,
        data=data_cfg,
        preprocess=preprocess,
        arch=arch,
        train=train_cfg,
        epsilon=epsilon,
        weights_file=weights_file,
        phases=phases,
    )


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Load a TOML config, or the ``config.resolved.json`` written by a training run.

    Relative paths in TOML are taken relative to the file; a resolved JSON
    config already holds them as they were resolved.
    """
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if path.suffix == ".json":
        try:
            d, base = json.loads(path.read_text()), Path(".")
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        d, base = read_toml(path), path.parent
    try:
        return config_from_dict(d, base)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_overrides(cfg: ExperimentConfig, **flags) -> ExperimentConfig:
    """Flags win over file values; ``None`` means not given."""
    changes: dict[str, Any] = {}
    for key in ("mode", "seed", "out", "threads"):
        if flags.get(key) is not None:
            changes[key] = flags[key]
    pre = cfg.preprocess
    if flags.get("z_min") is not None:
        pre = replace(pre, z_min=_z_min(flags["z_min"]))
    if flags.get("no_frontal_filter"):
        pre = replace(pre, frontal=False)
    changes["preprocess"] = pre
    return replace(cfg, **changes)


def resolved_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
