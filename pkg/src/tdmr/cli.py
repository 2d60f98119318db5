"""Command-line entry point: ``tdmr <subcommand> [--config ...] [--out ...]``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import equalizers as eq
from . import experiment as ex
from .channel import ChannelConfig, SectorFileError, generate_dataset
from .metrics import mutual_information
from .training import NearTieError, TrainingDiverged, gradient_check, minibatch, solve_lmmse
from .trellis import read_llr_dump

log = logging.getLogger("tdmr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

MSE_TOL, CE_TOL = 1e-6, 1e-4


def _load(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, replication_seeds=(args.seed,))
    return cfg


def _out_dir(args, cfg: ex.ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def cmd_generate(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, channel=dataclasses.replace(cfg.channel, rng_seed=args.seed))
    if args.out or not cfg.dataset.path:
        path = _out_dir(args, cfg) / "sectors.txt"
    else:
        path = Path(cfg.dataset.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ex.write_dataset(cfg, path)
    print(f"wrote {cfg.dataset.sectors} sectors x {cfg.dataset.bits_per_sector} bits to {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    res = ex.run_experiment(cfg, _out_dir(args, cfg), threads=args.threads)
    for row in res.rows:
        print(f"{row['arch']:<44} K={row['K']:<4} ber={row['ber']:<12} "
              f"complexity={row['complexity']:<4} mi_bits={row['mi_bits']}")
    print(f"outputs in {res.out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = list(args.configs or []) + ([args.config] if args.config else [])
    if len(paths) < 2:
        raise ex.ConfigError("sweep needs at least 2 config files")
    cfgs = [ex.load_config(p) for p in paths]
    if args.seed is not None:
        cfgs = [dataclasses.replace(c, replication_seeds=(args.seed,)) for c in cfgs]
    out = Path(args.out) if args.out else Path(cfgs[0].output_dir)
    res = ex.run_sweep(cfgs, out, threads=args.threads, svg=args.svg)
    for label, x, y in res.points:
        print(f"{label:<44} complexity={x:<4} ber={y:.6g}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_complexity(args) -> int:
    print(ex.format_complexity_table())
    return EXIT_OK


def cmd_mi(args) -> int:
    if not args.llr:
        raise ex.ConfigError("mi needs --llr <dump file>")
    llr, u = read_llr_dump(args.llr)
    nats = mutual_information(llr, u, k=args.k)
    print(f"n={llr.size} k={args.k} mi_nats={nats:.6f} mi_bits={nats / np.log(2):.6f}")
    return EXIT_OK


def cmd_check(args) -> int:
    """Finite-difference gradient check of every architecture, both losses."""
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    chan = ChannelConfig()
    sectors = generate_dataset(chan, 2, 4000, seed=seed)
    lin, g = solve_lmmse(sectors, 2, 3)
    failed = False
    for arch in eq.ARCHS:
        spec = eq.EqualizerSpec(arch, M=2, K=4, M_prime=1)
        worst = {"MSE": 0.0, "CE": 0.0}
        for _ in range(args.points):
            p = eq.init_params(spec, rng, sample_r=sectors[0].adc,
                               linear_taps=lin["f"] if spec.taps == lin["f"].shape[1] else None)
            for loss in ("MSE", "CE"):
                for _attempt in range(20):
                    a = int(rng.integers(10, 3000))
                    mb = minibatch(sectors[1], eq.context(spec), len(g), a, a + 24)
                    try:
                        err = gradient_check(spec, p, g, mb, loss)
                        break
                    except NearTieError:
                        continue
                else:
                    raise TrainingDiverged(f"{arch}/{loss}: no tie-free minibatch found")
                worst[loss] = max(worst[loss], err)
        ok = worst["MSE"] <= MSE_TOL and worst["CE"] <= CE_TOL
        failed |= not ok
        print(f"{arch:<9} mse_rel_err={worst['MSE']:.2e} ce_rel_err={worst['CE']:.2e} "
              f"{'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep,
            "complexity": cmd_complexity, "mi": cmd_mi, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replications")
    common.add_argument("--seed", type=int, default=None, help="override the replication seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tdmr", description="TDMR equalizer experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic sector file")
    sub.add_parser("run", parents=[common], help="train and evaluate one config")
    sw = sub.add_parser("sweep", parents=[common], help="run several configs, emit plot data")
    sw.add_argument("configs", nargs="*", help="config files")
    sw.add_argument("--svg", action="store_true", help="also write plot.svg")
    sub.add_parser("complexity", parents=[common], help="parameter counts vs the reference table")
    mi = sub.add_parser("mi", parents=[common], help="mutual information of an LLR dump")
    mi.add_argument("--llr", help="LLR dump file (rows 'n llr hard u')")
    mi.add_argument("--k", type=int, default=3)
    ck = sub.add_parser("check", parents=[common], help="gradient check of every architecture")
    ck.add_argument("--points", type=int, default=3, help="random parameter points per architecture")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NearTieError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SectorFileError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
