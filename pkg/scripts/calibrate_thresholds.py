"""Measure the baseline / weighted-incremental gap used by the acceptance gates.

    python scripts/calibrate_thresholds.py --seeds 0 1 2 3 4

For each seed prints the point fractions, the rare-class IoU of both modes,
and the weighted-incremental rare-class IoU after every phase. The gates in
tests/test_acceptance.py (DELTA_LOW, DELTA_HIGH) were frozen from this output:
DELTA_LOW sits above every baseline value and DELTA_HIGH below every
weighted-incremental value, with a margin on both sides.
"""
import argparse
import time

from imbaseg.benchmark import BenchmarkSetup, rare_fraction, rare_iou, run_seed


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = p.parse_args(argv)
    setup = BenchmarkSetup()
    cat = setup.catalog

    base, winc = [], []
    for seed in args.seeds:
        t0 = time.perf_counter()
        runs, train, test = run_seed(seed, ("baseline", "weighted-incremental"), setup)
        bg, rare = rare_fraction(train, cat)
        b = rare_iou(runs["baseline"].test_iou, cat)
        w = rare_iou(runs["weighted-incremental"].test_iou, cat)
        phases = [rare_iou(v, cat) for v in runs["weighted-incremental"].phase_test_iou]
        base.append(b)
        winc.append(w)
        trail = " -> ".join(f"{v:.3f}" for v in phases)
        print(
            f"seed {seed}: bg {bg:.4f} rare {rare:.4f} | baseline {b:.4f} | "
            f"weighted-incremental {w:.4f} (phases {trail}; final/first {w / phases[0] if phases[0] else float('nan'):.2f})"
            f" [{time.perf_counter() - t0:.0f}s]"
        )
    print(f"\nbaseline max {max(base):.4f}; weighted-incremental min {min(winc):.4f}")


if __name__ == "__main__":
    main()
