"""Command line entry point: ``gentrain <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment, gradcheck
from .config import ConfigError, ExperimentConfig, load_config
from .seeding import stream
from .world import build_world


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    if args.output_dir is not None:
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


def _finish(records, cfg, name: str) -> int:
    rows = experiment.summarize(records)
    paths = experiment.emit_metrics(records, cfg, cfg.output_dir, name)
    print(experiment.format_table(rows))
    print(f"summary: {paths['summary']}")
    failed = [r for r in records if r.error]
    for r in failed:
        print(f"FAILED {r.cell} seed {r.seed}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_ablation(args) -> int:
    cfg = _load(args)
    return _finish(experiment.run_ablation(cfg, args.threads), cfg, "ablation")


def cmd_sweep(args) -> int:
    cfg = _load(args)
    return _finish(experiment.run_r_sweep(cfg, args.threads), cfg, "sweep_r")


def cmd_train(args) -> int:
    cfg = _load(args)
    return _finish(experiment.run_single(cfg, args.threads), cfg, "train")


def cmd_gradcheck(args) -> int:
    ok, report = gradcheck.run(args.seed or 0)
    print(report)
    return 0 if ok else 1


def cmd_world_inspect(args) -> int:
    cfg = _load(args)
    world = build_world(cfg.world)
    rng = stream(cfg.seeds[0], "inspect")
    n = 2000
    y = np.arange(n) % world.n_classes
    gen = world.generate_batch(world.sample_latent(rng, n), y)
    real = world.sample_real_batch(y, rng)
    info = {
        "config": cfg.world.to_dict(),
        "generator_hash": world.weights_hash(),
        "generated_mean_abs": float(np.abs(gen).mean()),
        "generated_std": float(gen.std(axis=0).mean()),
        "real_std": float(real.std(axis=0).mean()),
        "mean_gap": float(np.abs(real.mean(axis=0) - gen.mean(axis=0)).mean()),
    }
    print(json.dumps(info, indent=1))
    if args.dump:
        world.save(args.dump)
        print(f"weights written to {args.dump}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gentrain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="experiment config (YAML)")
    common.add_argument("-s", "--seed", type=int, help="run this single seed instead of the config's list")
    common.add_argument("-o", "--output-dir", help="where metric files go (overrides config)")
    common.add_argument("-j", "--threads", type=int, default=1, help="worker processes for independent cells")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ablation", parents=[common], help="all 8 method combinations + real reference") \
        .set_defaults(func=cmd_ablation)
    sub.add_parser("sweep-r", parents=[common], help="replacement-fraction sweep, with/without BNA") \
        .set_defaults(func=cmd_sweep)
    sub.add_parser("train", parents=[common], help="the single cell selected by `methods`") \
        .set_defaults(func=cmd_train)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient path") \
        .set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("world-inspect", parents=[common], help="summarise (and optionally dump) the world")
    p.add_argument("--dump", type=Path, help="write generator weights to this .npz")
    p.set_defaults(func=cmd_world_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error:\n{err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
