"""Command-line interface.

Subcommands: simulate (write a panel CSV), truth (print a ground-truth JSON),
estimate (one estimator cell on a panel file), bench (full benchmark from a
config file), report (re-emit tables from a saved report.json).  Exit codes:
0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import sys

from .errors import DtrBenchError
from .estimators import (DEFAULT_LEARNER, METHODS, OUTCOME_LEARNERS,
                         EstimatorConfig, run_estimator)
from .harness import (BenchConfig, canonical_kind, emit_report, load_config,
                      parse_config_text, run_benchmark, table_record)
from .panel import read_csv, write_csv
from .sem import SimSpec, counterfactual_truth, make_regime, simulate_panel


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtrbench",
                     description="Longitudinal treatment-regime benchmark engine")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", help="simulate a panel and write it as CSV")
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--K", type=int, required=True, help="last treatment time point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("truth", help="Monte Carlo counterfactual ground truth")
    p.add_argument("--regime", required=True,
                   help="always | never | 750s | 350s (or full kind name)")
    p.add_argument("--K", type=int, default=11)
    p.add_argument("--mc", type=int, default=1_000_000, help="Monte Carlo samples")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("estimate", help="run one estimator cell on a panel CSV")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--learner", default=None, choices=OUTCOME_LEARNERS)
    p.add_argument("--regime", required=True)
    p.add_argument("--panel", required=True, help="panel CSV path")
    p.add_argument("--horizon", type=int, default=None,
                   help="last treatment time point (default: panel's K)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mc", type=int, default=0,
                   help="if > 0, also compute the ground truth with this many samples")

    p = sub.add_parser("bench", help="full benchmark run from a config file")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--R", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mc", type=int, default=None, help="truth Monte Carlo samples")
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("report", help="re-emit tables from a saved report.json")
    p.add_argument("--json", dest="json_path", required=True)
    p.add_argument("--out", default=None, help="output directory (default: alongside the JSON)")
    p.add_argument("--formats", default="csv,plotdata",
                   help="comma list from: csv, json, plotdata")

    return parser


def _cmd_simulate(args) -> int:
    panel = simulate_panel(SimSpec(n_subjects=args.n, horizon=args.K, seed=args.seed))
    write_csv(panel, args.out)
    print(f"wrote {args.out}: {panel.n} subjects, time points 0..{panel.K + 1}")
    return 0


def _cmd_truth(args) -> int:
    regime = make_regime(canonical_kind(args.regime))
    g = counterfactual_truth(SimSpec(n_subjects=1, horizon=args.K, seed=args.seed),
                             regime, args.mc)
    print(json.dumps({
        "regime": regime.kind, "K": args.K, "time_point": args.K + 1,
        "value": g.value, "mc_samples": g.mc_samples,
        "mc_standard_error": g.mc_standard_error,
    }, indent=2))
    return 0


def _cmd_estimate(args) -> int:
    panel = read_csv(args.panel)
    regime = make_regime(canonical_kind(args.regime))
    horizon = args.horizon if args.horizon is not None else panel.K
    truth = None
    if args.mc > 0:
        truth = counterfactual_truth(
            SimSpec(n_subjects=1, horizon=horizon, seed=args.seed),
            regime, args.mc).value
    config = EstimatorConfig(method=args.method, outcome_learner=args.learner,
                             seed=args.seed)
    est = run_estimator(config, panel, regime, horizon, truth=truth)
    print(json.dumps(est.to_dict(), indent=2))
    return 0


def _cmd_bench(args) -> int:
    config = load_config(args.config) if args.config else BenchConfig()
    overrides = []
    if args.n is not None:
        overrides.append(f"n = {args.n}")
    if args.K is not None:
        overrides.append(f"K = {args.K}")
    if args.R is not None:
        overrides.append(f"R = {args.R}")
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.mc is not None:
        overrides.append(f"mc_samples = {args.mc}")
    if args.out is not None:
        overrides.append(f"out_dir = {args.out}")
    if overrides:
        config = parse_config_text("\n".join(overrides), base=config)
    table = run_benchmark(config)
    written = emit_report(table)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    with open(args.json_path) as fh:
        record = json.load(fh)
    formats = tuple(tok.strip() for tok in args.formats.split(",") if tok.strip())
    out_dir = args.out
    if out_dir is None:
        import os
        out_dir = os.path.dirname(os.path.abspath(args.json_path))
    written = emit_report(record, out_dir=out_dir, formats=formats)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "truth": _cmd_truth,
    "estimate": _cmd_estimate,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except DtrBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
