"""Train, compare and cross-check Kronecker-factored preconditioners from the shell.

Exit status: 0 success, 1 a claim check failed, 2 bad usage or configuration,
3 an input/output error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import KLShampooError
from . import claims, config, runner

EXIT_OK, EXIT_CLAIM, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _add_run_flags(p: argparse.ArgumentParser):
    d = config.DEFAULTS
    p.add_argument("--task", default=d["task"])
    p.add_argument("--dims", default=d["dims"], help="e.g. 8x6; empty for the task default")
    p.add_argument("--optimizer", default=d["optimizer"])
    p.add_argument("--gamma", type=float, default=d["gamma"])
    p.add_argument("--beta1", type=float, default=d["beta1"])
    p.add_argument("--beta2", type=float, default=d["beta2"])
    p.add_argument("--kappa", type=float, default=d["kappa"])
    p.add_argument("--power", type=float, choices=(0.25, 0.5), default=d["power"])
    p.add_argument("--refresh-interval", type=int, default=d["refresh-interval"])
    p.add_argument("--weight-decay", type=float, default=d["weight-decay"])
    p.add_argument("--grafting", type=config.parse_bool, default=d["grafting"])
    p.add_argument("--bias-correction", type=config.parse_bool, default=d["bias-correction"])
    p.add_argument("--epsilon", type=float, default=d["epsilon"])
    p.add_argument("--steps", type=int, default=d["steps"])
    p.add_argument("--seed", type=int, default=d["seed"])
    p.add_argument("--batch", type=int, default=d["batch"], help="samples per step; <= 0 for exact gradients")
    p.add_argument("--warmup", type=int, default=d["warmup"], help="linear step-size warmup length")
    p.add_argument("--timing", action="store_true", help="record wall time (output no longer reproducible)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="klshampoo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="train one optimizer on one task, write a CSV"))
    c = sub.add_parser("claims", help="run the oracle cross-checks")
    c.add_argument("--tol-profile", choices=("default", "strict"), default="default")
    c.add_argument("--seeds", type=int, default=len(claims.DEFAULT_GRID), help="size of the seed grid")
    c.add_argument("--out", required=True)
    m = sub.add_parser("compare", help="run a grid from a config file")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--threshold", type=float, default=runner.DEFAULT_THRESHOLD)
    m.add_argument("--workers", type=int, default=1)
    return parser


def _run(args) -> int:
    values = {k.replace("_", "-"): v for k, v in vars(args).items() if k.replace("_", "-") in config.KEYS}
    spec = config.build(values)
    recs = runner.run_task(spec.task, spec.cfg, warmup=spec.warmup, timing=args.timing)
    runner.write_csv(recs, args.out)
    s = runner.summarize(recs)
    print(f"final_loss={s['final_loss']} steps={s['steps_run']} diverged={s['diverged']}")
    return EXIT_OK


def _claims(args) -> int:
    report = claims.run_claims(args.tol_profile, range(args.seeds))
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    print(claims.format_report(report))
    return EXIT_OK if report["passed"] else EXIT_CLAIM


def _compare(args) -> int:
    runs = config.parse_config(Path(args.config).read_text())
    summary = runner.run_grid([(r.task, r.cfg, r.warmup) for r in runs], args.out, args.threshold, args.workers)
    for e in summary["runs"]:
        print(f"{e['run']}: final={e['final_loss']} best={e['best_loss']} to_threshold={e['steps_to_threshold']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    handlers = {"run": _run, "claims": _claims, "compare": _compare}
    try:
        return handlers[args.command](args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (KLShampooError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
