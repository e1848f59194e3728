"""Command-line entry points: ``maze-gen``, ``laser-run``, ``laser-scan``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import maze
from .errors import LaserError
from .harness.config import Mode, RunConfig, load_config
from .harness.metrics import write_experiment
from .harness.runner import load_data, run_experiment
from .harness.scan import find_checkpoints, spectral_scan


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bits_list(text: str) -> tuple[int | None, ...]:
    out = []
    for x in text.split(","):
        x = x.strip().lower()
        out.append(None if x in ("none", "fp", "full") else int(x))
    return tuple(out)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


def maze_gen(argv=None) -> int:
    p = argparse.ArgumentParser(prog="maze-gen", description="Generate a binary dataset of solved mazes.")
    p.add_argument("--size", type=int, default=7, help="odd grid side length (>= 5)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args(argv)
    try:
        instances = maze.generate_dataset(args.count, args.size, args.seed)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        maze.write_dataset(instances, args.out)
    except (LaserError, ValueError) as exc:
        print(f"maze-gen: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(instances)} mazes ({args.size}x{args.size}) to {args.out}")
    return 0


def laser_run(argv=None) -> int:
    p = argparse.ArgumentParser(prog="laser-run", description="Train the recursive model over several seeds.")
    p.add_argument("--config", type=Path, help="TOML run configuration (defaults if omitted)")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.mode:
            cfg = replace(cfg, mode=Mode(args.mode))
        if args.seeds:
            cfg = replace(cfg, seeds=args.seeds)
        cfg = replace(cfg, output_dir=str(args.out))
        result = run_experiment(cfg, args.out, jobs=args.jobs)
        write_experiment(result, args.out)
    except LaserError as exc:
        print(f"laser-run: {exc}", file=sys.stderr)
        return 2
    print((args.out / "summary.txt").read_text(), end="")
    if result.failed_seeds:
        for s in result.failed_seeds:
            print(f"laser-run: seed {s} failed: {result.runs[s].failed}", file=sys.stderr)
        return 1
    return 0


def laser_scan(argv=None) -> int:
    p = argparse.ArgumentParser(prog="laser-scan", description="Oracle-SVD fidelity of site activations across checkpoints.")
    p.add_argument("--ckpt-dir", type=Path, required=True)
    p.add_argument("--ranks", type=_int_list, required=True)
    p.add_argument("--bits", type=_bits_list, default=(None,), help="e.g. none,8,16")
    p.add_argument("--config", type=Path, help="run config for the probe data (defaults to <ckpt-dir>/config.toml)")
    p.add_argument("--probe", type=int, default=64, help="validation mazes in the probe set")
    p.add_argument("--out", type=Path, help="CSV output (defaults to <ckpt-dir>/scan.csv)")
    args = p.parse_args(argv)
    try:
        cfg_path = args.config or args.ckpt_dir / "config.toml"
        cfg = load_config(cfg_path) if cfg_path.exists() else RunConfig()
        _, (xva, _) = load_data(cfg)
        probe = xva[: args.probe]
        rows = spectral_scan(find_checkpoints(args.ckpt_dir), probe, args.ranks, args.bits)
    except (LaserError, ValueError) as exc:
        print(f"laser-scan: {exc}", file=sys.stderr)
        return 2
    out = args.out or args.ckpt_dir / "scan.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    last = max(r["step"] for r in rows)
    for r in rows:
        if r["step"] == last and r["bits"] is None:
            print(f"seed {r['seed']} step {r['step']:>6} {r['site']:<14} k={r['rank']:<4} fidelity {r['fidelity']:.4f}")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(laser_run())
