"""Run every reference configuration and print the BER / complexity / MI table.

Usage: python scripts/run_table.py [--out out/table] [--threads N] [--seeds 0,1,...]

With all ten replication seeds this takes about 45 s per configuration on one
core. ``--seeds`` overrides the replication seeds of every config (for a
quicker look).
"""
import argparse
import dataclasses
from pathlib import Path

from tdmr import experiment as ex

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ORDER = ["lmmse_fixed_371", "lmmse", "lece", "lece_21tap", "rbfnn_k6", "firrbfnn", "mlp",
         "rcmlp1_k6", "rcmlp1_k10", "rcmlp1_k14", "rcmlp1_k18", "rcmlp2", "rcmlp3", "rcmlp4"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/table")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seeds", help="comma-separated replication seeds")
    args = ap.parse_args()
    cfgs = [ex.load_config(CONFIGS / f"{name}.cfg") for name in ORDER]
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        cfgs = [dataclasses.replace(c, replication_seeds=seeds) for c in cfgs]
    res = ex.run_sweep(cfgs, args.out, threads=args.threads, svg=True)
    print(f"{'architecture':<36} {'K':>4} {'complexity':>10} {'BER':>10} {'MI bits':>8}")
    for run in res.runs:
        m = run.mean
        print(f"{m['arch']:<36} {m['K']:>4} {m['complexity']:>10} {float(m['ber']):>10.5f} "
              f"{float(m['mi_bits']):>8.5f}")
    print(f"outputs in {args.out}")


if __name__ == "__main__":
    main()
