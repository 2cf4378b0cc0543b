"""Command-line entry point: ``sparsenet <subcommand> --config run.yaml``.

Exit codes: 0 success, 1 some cell failed, 2 invalid config or arguments.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .experiments import (ConfigError, cmd_compare, cmd_prune, cmd_shuffle_width, cmd_trace,
                          cmd_train, load_config, write_atomic)
from .lemmas import verify_all

EXIT_OK, EXIT_CELL_FAILED, EXIT_BAD_CONFIG = 0, 1, 2

GRID_COMMANDS = ("prune", "compare", "shuffle-width", "trace", "train")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_BAD_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsenet", description="Prune-at-initialization experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        sp.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2")
        sp.add_argument("--workers", type=int,
                        help="parallel cells; SPARSENET_WORKERS takes precedence")

    for name in GRID_COMMANDS:
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--methods", type=_str_list)
        sp.add_argument("--densities", type=_float_list)
        if name in ("shuffle-width", "train"):
            sp.add_argument("--masks", help="directory of mask files (default OUT/masks)")
        if name == "shuffle-width":
            sp.add_argument("--width-factor", type=float, dest="width_factor")

    sp = sub.add_parser("verify-lemmas")
    common(sp, config_required=False)
    return p


def _workers(flag: int | None, configured: int) -> int:
    env = os.environ.get("SPARSENET_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"SPARSENET_WORKERS must be an integer, got {env!r}") from None
    else:
        n = flag if flag is not None else configured
    if n < 1:
        raise ConfigError(f"worker count must be >= 1, got {n}")
    return n


def _verify_lemmas(args) -> int:
    seeds = args.seeds or [0]
    out = Path(args.out) if args.out else None
    rows = []
    for seed in seeds:
        for r in verify_all(seed):
            rows.append({"seed": seed, **r.to_dict()})
            print(f"[{'PASS' if r.passed else 'FAIL'}] seed={seed} {r.check}: "
                  f"expected {r.expected}, measured {r.measured}")
    if out is not None:
        write_atomic(out / "lemmas.json", json.dumps(rows, indent=1, sort_keys=True) + "\n")
        write_atomic(out / "manifest.json", json.dumps(
            {"command": "verify-lemmas", "seeds": seeds}, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify-lemmas":
            return _verify_lemmas(args)
        overrides = {k: getattr(args, k, None)
                     for k in ("seeds", "methods", "densities", "width_factor", "out")}
        cfg = load_config(args.config, overrides)
        workers = _workers(args.workers, cfg.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    out = Path(cfg.out)
    masks = getattr(args, "masks", None)
    if args.command == "prune":
        rows = cmd_prune(cfg, out, workers).rows
    elif args.command == "compare":
        rows = cmd_compare(cfg, out, workers).rows
    elif args.command == "train":
        rows = cmd_train(cfg, out, masks, workers).rows
    elif args.command == "shuffle-width":
        rows = cmd_shuffle_width(cfg, out, masks, workers)
    else:
        rows = cmd_trace(cfg, out, workers)

    failed = [r for r in rows if r.status != "ok"]
    for r in failed:
        print(f"cell {r.method} density={r.density:g} seed={r.seed} failed: {r.reason}",
              file=sys.stderr)
    print(f"{len(rows) - len(failed)}/{len(rows)} cells succeeded; outputs in {out}")
    return EXIT_CELL_FAILED if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
