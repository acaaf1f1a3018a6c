"""Command-line entry point: ``aipod run | sweep | verify``."""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .errors import AipodError
from .harness import emit_config, load_config, run_experiment, sweep, verify


def _load(path):
    cfg = load_config(path)
    env = os.environ.get("BILEVEL_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise AipodError(f"BILEVEL_SEED must be an integer, got {env!r}") from None
        cfg = replace(cfg, solver=replace(cfg.solver, master_seed=seed))
    return cfg


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            out.append(float(tok))
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aipod", description="Equality-constrained stochastic bilevel solvers.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--out", default=None)

    sw = sub.add_parser("sweep", help="run a config over several values of one solver parameter")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, help="comma-separated, e.g. 0.1,0.3,1.0")
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--out", default=None)

    ver = sub.add_parser("verify", help="noiseless oracle self-checks on a small instance")
    ver.add_argument("--d", type=int, default=12)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--kind", default="synthetic", choices=("synthetic", "quadratic"))
    ver.add_argument("--rank", type=int, default=None, help="constraint rank (0 means unconstrained)")
    ver.add_argument("--corrupt-xy", action="store_true", help=argparse.SUPPRESS)

    show = sub.add_parser("show-config", help="print a config with every default filled in")
    show.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            summary = run_experiment(_load(args.config), jobs=args.jobs, out=args.out)
            print(f"wrote {len(summary['runs'])} runs")
        elif args.command == "sweep":
            values = _parse_values(args.values)
            summary = sweep(_load(args.config), args.param, values, jobs=args.jobs, out=args.out)
            print(f"wrote {len(summary['runs'])} runs")
        elif args.command == "show-config":
            sys.stdout.write(emit_config(_load(args.config)))
        else:
            results = verify(args.kind, args.d, args.seed, args.corrupt_xy, args.rank)
            for r in results:
                print(r.line())
            return 0 if all(r.ok for r in results) else 1
    except AipodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
