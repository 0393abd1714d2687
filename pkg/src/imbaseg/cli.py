"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error (unreadable,
malformed or empty inputs, bad checkpoints), 4 training failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .benchmark import MODE_TITLES, MODES
from .config import ExperimentConfig, apply_overrides, load_config, load_spec_file, resolved_json
from .curriculum import PhaseResult, evaluate, run_curriculum
from .datasets import (
    RawScene,
    dataset_digest,
    generate_synthetic_dataset,
    load_dataset_dir,
    prepare,
    require_points,
    write_synthetic_dataset,
)
from .errors import CatalogMismatchError, ConfigError, DataError, DomainError, ImbasegError, TrainingError
from .geom import NO_OBJECT, ClassCatalog, LabeledCloud
from .imbalance import ClassWeights, class_frequencies, class_weights, format_weight_table, parse_weight_table
from .ingest import compute_stats
from .metrics import confusion_csv, fmt_iou, iou_csv, iou_per_class, iou_table, mean_iou, read_iou_csv
from .net import atomic_write_text, checkpoint_sidecar, load_checkpoint, save_checkpoint

log = logging.getLogger("imbaseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4
RUN_FORMAT = "imbaseg-run"


# ------------------------------------------------------------------ data access


def _warn_skipped(scenes: list[RawScene]) -> None:
    skipped = sum(s.skipped_labels for s in scenes)
    if skipped:
        print(f"warning: skipped {skipped} label line(s) with types outside the catalog", file=sys.stderr)


def load_raw(cfg: ExperimentConfig, split: str, data_dir: str | None = None) -> list[RawScene]:
    """Scenes for ``split`` ('train' or 'eval'), or from ``data_dir`` when given."""
    if data_dir is not None:
        scenes = load_dataset_dir(data_dir, cfg.catalog)
    elif cfg.data.source == "dir":
        path = cfg.data.path if split == "train" else (cfg.data.eval_path or cfg.data.path)
        scenes = load_dataset_dir(path, cfg.catalog)
    else:
        seed = int(cfg.seed) + (0 if split == "train" else cfg.data.eval_seed_offset)
        n = cfg.data.train_scenes if split == "train" else cfg.data.eval_scenes
        scenes = generate_synthetic_dataset(cfg.data.synthetic, seed, n, cfg.catalog)
    _warn_skipped(scenes)
    return scenes


def load_clouds(cfg: ExperimentConfig, split: str, data_dir: str | None = None) -> list[LabeledCloud]:
    clouds = prepare(load_raw(cfg, split, data_dir), cfg.preprocess)
    require_points(clouds)
    return clouds


def resolve_weights(cfg: ExperimentConfig, train: list[LabeledCloud]) -> ClassWeights:
    if cfg.weights_file:
        try:
            text = Path(cfg.weights_file).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read weights file {cfg.weights_file}: {exc.strerror}") from None
        return ClassWeights.from_table(parse_weight_table(text), cfg.catalog)
    return class_weights(class_frequencies(compute_stats(train, cfg.catalog)), cfg.epsilon)


# ------------------------------------------------------------------ rendering


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def stats_table(clouds, scenes, catalog: ClassCatalog, epsilon: float) -> str:
    stats = compute_stats(clouds, catalog, [s.annotations for s in scenes])
    freqs = class_frequencies(stats)
    weights = class_weights(freqs, epsilon)
    rows = [["Class", "Points", "Instances", "Frequency", "Weight"]]
    for name, p, n, f, w in zip(catalog, stats.point_counts, stats.instance_counts, freqs, weights.weights):
        rows.append([name, str(p), str(n), f"{f:.6f}", f"{w:.6g}"])
    rows.append(["total", str(stats.total_points), str(sum(stats.instance_counts)), "1.000000", ""])
    return _aligned(rows)


def phase_manifest(results: list[PhaseResult], catalog: ClassCatalog) -> str:
    rows = [["phase", "active", "epochs_run", "best_epoch", "checksum"]]
    for r in results:
        active = ",".join(catalog.names[i] for i in sorted(r.active))
        rows.append([str(r.phase_index), active, str(r.epochs_run), str(r.best_epoch), f"{r.checksum:016x}"])
    return _aligned(rows)


def loss_curves_csv(results: list[PhaseResult]) -> str:
    rows = [["phase", "epoch", "loss", "val_miou"]]
    for r in results:
        for e, loss in enumerate(r.loss_curve, start=1):
            val = r.val_score_curve[e - 1] if e <= len(r.val_score_curve) else None
            rows.append([r.phase_index, e, repr(loss), fmt_iou(val)])
    return _csv(rows)


# ------------------------------------------------------------------ commands


def cmd_stats(cfg: ExperimentConfig, data_dir: str | None = None) -> str:
    scenes = load_raw(cfg, "train", data_dir)
    clouds = prepare(scenes, cfg.preprocess)
    require_points(clouds)
    text = stats_table(clouds, scenes, cfg.catalog, cfg.epsilon)
    if cfg.out:
        atomic_write_text(Path(cfg.out) / "stats.txt", text)
    return text


def cmd_synth(cfg: ExperimentConfig, spec_path: str | None, n_scenes: int | None) -> Path:
    if not cfg.out:
        raise ConfigError("synth needs --out")
    spec = load_spec_file(spec_path) if spec_path else cfg.data.synthetic
    n = cfg.data.train_scenes if n_scenes is None else n_scenes
    if n < 1:
        raise ConfigError("--scenes must be positive")
    write_synthetic_dataset(cfg.out, spec, int(cfg.seed), n, cfg.catalog)
    return Path(cfg.out)


def write_eval(out: Path, cm, catalog: ClassCatalog, prefix: str = "eval") -> None:
    atomic_write_text(out / f"{prefix}_confusion.csv", confusion_csv(cm, catalog))
    atomic_write_text(out / f"{prefix}_iou.csv", iou_csv(cm, catalog))
    atomic_write_text(out / f"{prefix}_iou.txt", iou_table(cm, catalog))


def cmd_train(cfg: ExperimentConfig) -> Path:
    """Train one mode and write the run directory. Durations go to stdout only."""
    if not cfg.out:
        raise ConfigError("train needs --out")
    out = Path(cfg.out)
    plan = cfg.plan()
    t0 = time.perf_counter()
    train = load_clouds(cfg, "train")
    test = load_clouds(cfg, "eval")
    weights = resolve_weights(cfg, train) if cfg.weighted else ClassWeights.uniform(len(cfg.catalog))
    atomic_write_text(out / "config.resolved.json", resolved_json(cfg))
    atomic_write_text(out / "weights.txt", format_weight_table(weights, cfg.catalog))
    print(f"data: {len(train)} training scenes, {len(test)} evaluation scenes ({time.perf_counter() - t0:.1f}s)")

    phase_t0 = [time.perf_counter()]

    def on_phase_end(r: PhaseResult) -> None:
        name = out / f"phase_{r.phase_index:02d}.ckpt"
        checksum = save_checkpoint(r.checkpoint, name)
        atomic_write_text(name.with_suffix(".txt"), checkpoint_sidecar(r.checkpoint, checksum))
        now = time.perf_counter()
        print(f"phase {r.phase_index}: {r.epochs_run} epochs, final loss {r.loss_curve[-1]:.5f} ({now - phase_t0[0]:.1f}s)")
        phase_t0[0] = now

    try:
        ckpt, results = run_curriculum(
            plan,
            train,
            cfg.train_config(),
            arch=cfg.arch,
            catalog=cfg.catalog,
            weights=weights if cfg.weighted else None,
            epsilon=cfg.epsilon,
            on_phase_end=on_phase_end,
        )
    except TrainingError as exc:
        done = getattr(exc, "completed_phases", [])
        if done:
            atomic_write_text(out / "phases.txt", phase_manifest(done, cfg.catalog))
        raise

    checksum = save_checkpoint(ckpt, out / "final.ckpt")
    atomic_write_text(out / "final.txt", checkpoint_sidecar(ckpt, checksum))
    atomic_write_text(out / "phases.txt", phase_manifest(results, cfg.catalog))
    atomic_write_text(out / "loss_curves.csv", loss_curves_csv(results))

    cm = evaluate(ckpt.params, test, cfg.threads)
    write_eval(out, cm, cfg.catalog)
    phase_ious = [iou_per_class(evaluate(r.checkpoint.params, test, cfg.threads)) for r in results]
    rows = [["class", *(f"phase_{r.phase_index}" for r in results)]]
    for i, name in enumerate(cfg.catalog):
        rows.append([name, *(fmt_iou(p[i]) for p in phase_ious)])
    atomic_write_text(out / "phase_eval_iou.csv", _csv(rows))

    trained = sorted(plan.cumulative(len(plan) - 1) | {NO_OBJECT})
    provenance = {
        "format": RUN_FORMAT,
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": int(cfg.seed),
        "mode": cfg.mode,
        "catalog": list(cfg.catalog.names),
        "trained_classes": [cfg.catalog.names[i] for i in trained],
        "train_digest": dataset_digest(train),
        "eval_digest": dataset_digest(test),
        "final_checksum": f"{checksum:016x}",
        "phase_checksums": [f"{r.checksum:016x}" for r in results],
    }
    atomic_write_text(out / "provenance.json", json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    print(iou_table(cm, cfg.catalog), end="")
    print(f"total {time.perf_counter() - t0:.1f}s; run written to {out}")
    return out


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, data_dir: str | None = None) -> str:
    ckpt = load_checkpoint(checkpoint)
    if ckpt.catalog != cfg.catalog:
        raise CatalogMismatchError(f"checkpoint catalog {ckpt.catalog.names} differs from configured {cfg.catalog.names}")
    clouds = load_clouds(cfg, "eval", data_dir)
    cm = evaluate(ckpt.params, clouds, cfg.threads)
    if cfg.out:
        out = Path(cfg.out)
        write_eval(out, cm, cfg.catalog)
        record = {
            "format": "imbaseg-eval",
            "config_hash": cfg.config_hash(),
            "seed": int(cfg.seed),
            "checkpoint_checksum": f"{int.from_bytes(Path(checkpoint).read_bytes()[-8:], 'little'):016x}",
            "eval_digest": dataset_digest(clouds),
        }
        atomic_write_text(out / "provenance.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    return iou_table(cm, cfg.catalog)


def read_run(run_dir: str | Path) -> dict:
    run = Path(run_dir)
    try:
        prov = json.loads((run / "provenance.json").read_text())
        ious = read_iou_csv((run / "eval_iou.csv").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{run} is not a completed run: {exc}") from None
    if prov.get("format") != RUN_FORMAT:
        raise DataError(f"{run} is not a training run directory")
    prov["ious"] = ious
    prov["dir"] = str(run)
    return prov


def compare_report(runs: list[dict]) -> tuple[str, str]:
    """Classes x modes IoU table with deltas against the baseline run (CSV, text)."""
    if len(runs) < 2:
        raise ConfigError("compare needs at least two runs")
    catalog = ClassCatalog(tuple(runs[0]["catalog"]))
    for r in runs[1:]:
        if tuple(r["catalog"]) != catalog.names:
            raise CatalogMismatchError(f"{r['dir']}: catalog {r['catalog']} differs from {list(catalog.names)}")
        if r["eval_digest"] != runs[0]["eval_digest"]:
            raise CatalogMismatchError(f"{r['dir']} was evaluated on a different evaluation set")

    # One column per mode in canonical order; repeated modes get their own column.
    columns: list[tuple[str, dict | None]] = []
    for mode in MODES:
        same = [r for r in runs if r["mode"] == mode]
        if not same:
            columns.append((MODE_TITLES[mode], None))
        for k, r in enumerate(same):
            columns.append((MODE_TITLES[mode] + (f" #{k + 1}" if k else ""), r))
    ref = next((r for r in runs if r["mode"] == "baseline"), runs[0])

    def cells(r: dict | None) -> list[float | None]:
        if r is None:
            return [None] * len(catalog)
        trained = set(r["trained_classes"])
        return [r["ious"].get(n) if n in trained else None for n in catalog]

    table = {title: cells(r) for title, r in columns}
    ref_cells = cells(ref)
    objects = sorted(catalog.object_ids)

    def means(v: list[float | None]) -> list[float | None]:
        return [mean_iou(v, objects), mean_iou(v, range(len(catalog)))]

    row_names = [*catalog, "mean (objects)", "mean (all)"]
    values = {t: v + means(v) for t, v in table.items()}
    ref_values = ref_cells + means(ref_cells)

    def delta(a, b):
        return "N/A" if a is None or b is None else f"{a - b:+.4f}"

    titles = [t for t, _ in columns]
    csv_rows = [["class", *titles, *(f"delta {t}" for t in titles)]]
    txt_rows = [["Class", *titles]]
    for i, name in enumerate(row_names):
        vals = [values[t][i] for t in titles]
        csv_rows.append([name, *map(fmt_iou, vals), *(delta(v, ref_values[i]) for v in vals)])
        txt_rows.append([name, *map(fmt_iou, vals)])
    txt_rows.append([""] * (len(titles) + 1))
    txt_rows.append([f"delta vs {MODE_TITLES[ref['mode']]}", *[""] * len(titles)])
    for i, name in enumerate(row_names):
        txt_rows.append([name, *(delta(values[t][i], ref_values[i]) for t in titles)])

    meta = ["", "runs:"]
    for title, r in columns:
        if r is not None:
            meta.append(f"  {title}: {r['dir']} seed={r['seed']} config={r['config_hash'][:16]}")
    meta.append("N/A: class absent from the evaluation set, not trained in that run, or mode not run")
    return _csv(csv_rows), _aligned(txt_rows) + "\n".join(meta) + "\n"


def cmd_compare(run_dirs: list[str], out: str | None) -> str:
    csv_text, txt = compare_report([read_run(d) for d in run_dirs])
    if out:
        atomic_write_text(Path(out) / "compare.csv", csv_text)
        atomic_write_text(Path(out) / "compare.txt", txt)
    return txt


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imbaseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, mode=False, filters=True):
        sp.add_argument("--config", metavar="PATH", help="TOML config (or a run's config.resolved.json)")
        sp.add_argument("--seed", type=int, metavar="U64")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--threads", type=int, metavar="N")
        if mode:
            sp.add_argument("--mode", choices=MODES, metavar="NAME", help=" | ".join(MODES))
        if filters:
            sp.add_argument("--z-min", dest="z_min", metavar="METERS", help="ground filter height; 'none' disables")
            sp.add_argument("--no-frontal-filter", action="store_true")
        sp.add_argument("-v", "--verbose", action="store_true", help="log every epoch")

    sp = sub.add_parser("stats", help="per-class point/instance counts, frequencies and weights")
    common(sp)
    sp.add_argument("--data", metavar="DIR", help="dataset directory (default: training data of the config)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, filters=False)
    sp.add_argument("--spec", metavar="PATH", help="synthetic scene spec (TOML)")
    sp.add_argument("--scenes", type=int, metavar="N")

    sp = sub.add_parser("train", help="train one mode and write a run directory")
    common(sp, mode=True)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--data", metavar="DIR", help="dataset directory (default: evaluation data of the config)")

    sp = sub.add_parser("compare", help="compare run directories mode by mode")
    sp.add_argument("runs", nargs="+", metavar="RUN_DIR")
    sp.add_argument("--out", metavar="DIR")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return apply_overrides(
        cfg,
        mode=getattr(args, "mode", None),
        seed=args.seed,
        out=args.out,
        threads=args.threads,
        z_min=getattr(args, "z_min", None),
        no_frontal_filter=getattr(args, "no_frontal_filter", False),
    )


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    if args.command == "compare":
        print(cmd_compare(args.runs, args.out), end="")
        return EXIT_OK
    cfg = _config(args)
    if args.command == "stats":
        print(cmd_stats(cfg, args.data), end="")
    elif args.command == "synth":
        print(f"wrote {cmd_synth(cfg, args.spec, args.scenes)}")
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "eval":
        print(cmd_eval(cfg, args.checkpoint, args.data), end="")
    return EXIT_OK


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DomainError)):
        return EXIT_CONFIG
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ImbasegError, OSError) as exc:
        print(f"imbaseg: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
