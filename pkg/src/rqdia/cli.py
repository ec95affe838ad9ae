"""Command line entry point.

    rqdia train --config run.ini [--seed N] [--out DIR] [--resume CKPT]
    rqdia eval --checkpoint ckpt_1000.rqck --episodes 10
    rqdia export-plots seed0/metrics.csv seed1/metrics.csv --out curve.csv
    rqdia dump-frames --config run.ini --steps 20 [--out DIR]

Exit codes: 0 success, 1 configuration error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import harness
from .config import ConfigError, load_config
from .envs import PixelEnv, random_action, write_pgm

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rqdia", description="Pixel SAC / C51 agents with Q-distribution regularisation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides [run] output_dir)")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)

    x = sub.add_parser("export-plots", help="aggregate metrics.csv files across seeds")
    x.add_argument("inputs", nargs="*")
    x.add_argument("--out", required=True)
    x.add_argument("--column", default="eval_return")

    d = sub.add_parser("dump-frames", help="write rendered frames of a random-action rollout as PGM files")
    d.add_argument("--config", required=True)
    d.add_argument("--steps", type=int, required=True)
    d.add_argument("--out", default="frames")
    d.add_argument("--seed", type=int)
    return p


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    res = harness.run_training(cfg, resume=args.resume)
    last = res.rows[-1]["eval_return"] if res.rows else float("nan")
    print(f"done: {res.env_step} env steps, final eval return {last:.4f}, metrics in {res.output_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    res = harness.evaluate(args.checkpoint, args.episodes)
    print(f"mean {res.mean:.6f}")
    print("returns " + " ".join(harness.fmt(r) for r in res.returns))
    return EXIT_OK


def cmd_export(args) -> int:
    rows = harness.export_plot_data(args.inputs, args.out, args.column)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_dump(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    if args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    os.makedirs(args.out, exist_ok=True)
    env = PixelEnv(cfg.env, np.random.default_rng(cfg.run.seed))
    rng = np.random.default_rng([cfg.run.seed, 1])
    env.reset()
    write_pgm(os.path.join(args.out, "frame_00000.pgm"), env.observation()[-1])
    for i in range(1, args.steps + 1):
        if env.done:
            env.reset()
        obs, _, _ = env.step(random_action(cfg.env, rng))
        write_pgm(os.path.join(args.out, f"frame_{i:05d}.pgm"), obs[-1])
    print(f"wrote {args.steps + 1} frames to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export-plots": cmd_export, "dump-frames": cmd_dump}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (harness.CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
