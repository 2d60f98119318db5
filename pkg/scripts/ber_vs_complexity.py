"""BER versus parameter count for the linear, RBF and reduced-complexity MLP equalizers.

Usage: python scripts/ber_vs_complexity.py [--out out/ber_vs_complexity] [--seeds 0,1,2]

Writes plot_data.csv (label, complexity, ber) and plot.svg in the output
directory.
"""
import argparse
import dataclasses
from pathlib import Path

from tdmr import experiment as ex

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SWEEP = ["lece", "rcmlp1_k6", "rcmlp1_k10", "rcmlp1_k14", "rcmlp1_k18", "rcmlp2", "rcmlp3",
         "rcmlp4", "firrbfnn", "mlp", "lece_21tap", "rbfnn_k6"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/ber_vs_complexity")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated replication seeds")
    args = ap.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    cfgs = [dataclasses.replace(ex.load_config(CONFIGS / f"{n}.cfg"), replication_seeds=seeds)
            for n in SWEEP]
    res = ex.run_sweep(cfgs, args.out, threads=args.threads, svg=True)
    for label, x, y in res.points:
        print(f"{label:<36} {x:>4} {y:.5f}")


if __name__ == "__main__":
    main()
