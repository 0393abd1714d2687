"""Four-mode comparison on the synthetic imbalance benchmark.

    python scripts/run_benchmark.py --seeds 0 1 2 --out runs/benchmark

Prints per-seed rare-class IoU for every mode and a classes x modes table
averaged over seeds; with --out also writes per_seed.csv and summary.csv.
"""
import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from imbaseg.benchmark import MODE_TITLES, MODES, BenchmarkSetup, rare_fraction, rare_iou, run_seed
from imbaseg.metrics import fmt_iou, mean_iou


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--epochs", type=int, help="override the benchmark epoch count")
    p.add_argument("--out", type=Path)
    args = p.parse_args(argv)

    setup = BenchmarkSetup()
    if args.epochs:
        setup = replace(setup, train=replace(setup.train, epochs=args.epochs))
    cat = setup.catalog

    per_seed = []
    ious = {m: [] for m in args.modes}
    for seed in args.seeds:
        t0 = time.perf_counter()
        runs, train, _ = run_seed(seed, args.modes, setup)
        bg, rare = rare_fraction(train, cat)
        row = {"seed": seed, "background": bg, "rare": rare}
        for m, r in runs.items():
            row[m] = rare_iou(r.test_iou, cat)
            ious[m].append(r.test_iou)
        per_seed.append(row)
        scores = "  ".join(f"{m}={row[m]:.4f}" for m in args.modes)
        print(f"seed {seed}: background {bg:.4f} rare {rare:.4f}  {scores}  ({time.perf_counter() - t0:.0f}s)")
        sys.stdout.flush()

    # classes x modes, mean over seeds of defined values
    print()
    header = ["class", *(MODE_TITLES[m] for m in args.modes)]
    table = []
    for i, name in enumerate(cat):
        cells = []
        for m in args.modes:
            vals = [v[i] for v in ious[m] if v[i] is not None]
            cells.append(float(np.mean(vals)) if vals else None)
        table.append([name, *cells])
    table.append(["mean (objects)", *(np.mean([mean_iou(v, cat.object_ids) or 0.0 for v in ious[m]]) for m in args.modes)])
    width = max(len(r[0]) for r in table)
    print("  ".join([header[0].ljust(width), *(h.rjust(12) for h in header[1:])]))
    for r in table:
        print("  ".join([r[0].ljust(width), *(fmt_iou(c).rjust(max(12, len(h))) for c, h in zip(r[1:], header[1:]))]))

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "per_seed.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["seed", "background", "rare", *args.modes], lineterminator="\n")
            w.writeheader()
            w.writerows(per_seed)
        with open(args.out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[r[0], *map(fmt_iou, r[1:])] for r in table])


if __name__ == "__main__":
    main()
