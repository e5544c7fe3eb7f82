"""Command-line entry point: ``fedofa run|audit-grads|check-equivalence|report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis
from .checkpoint import save_checkpoint
from .config import MODES, ExperimentConfig, load_config
from .server import run_experiment


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.dump_masks:
        cfg = replace(cfg, dump_masks=True)
    if args.rounds is not None:
        cfg = replace(cfg, rounds=args.rounds)
    log = run_experiment(cfg, progress=not args.quiet)
    out = Path(args.out)
    analysis.emit_report(log, out, plots=not args.no_plots)
    save_checkpoint(out / "checkpoint.npz", log.final_state)
    s = log.summary()
    print(f"{cfg.mode}: mean accuracy {s['mean']:.4f} +- {s['std']:.4f} over {len(s['per_client'])} clients -> {out}")
    return 0


def _cmd_audit(args) -> int:
    ok = True
    worst = {}
    for seed in range(args.seed, args.seed + args.seeds):
        for e in analysis.grad_audit(args.target or None, seed=seed).entries:
            worst[e.name] = max(worst.get(e.name, 0.0), e.max_rel_error)
    for name, err in worst.items():
        limit = analysis.THRESHOLDS[name]
        passed = err < limit
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<16} max rel error {err:.3e}  (limit {limit:.0e})")
    return 0 if ok else 1


def _cmd_equivalence(args) -> int:
    failures = 0
    worst = 0.0
    for t in range(args.trials):
        rep = analysis.linear_equivalence_check(args.features, args.samples, seed=args.seed + t)
        worst = max(worst, rep.stationarity_feature, rep.stationarity_filter)
        if not rep.passed(args.tol):
            failures += 1
            print(f"FAIL  trial {t}: {rep}")
    print(f"{args.trials - failures}/{args.trials} instances stationary and locally minimal "
          f"(worst gradient norm {worst:.2e}, tol {args.tol:.0e})")
    return 0 if failures == 0 else 1


def _cmd_report(args) -> int:
    log = analysis.read_metrics_csv(args.inp)
    files = analysis.emit_report(log, args.out, plots=not args.no_plots)
    print(json.dumps([str(f) for f in files]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedofa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated experiment and write a report")
    run.add_argument("--config", help="TOML config file (defaults apply when omitted)")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seed", type=int, help="sets the partition, init and training seeds")
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--dump-masks", action="store_true")
    run.add_argument("--rounds", type=int)
    run.add_argument("--no-plots", action="store_true")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=_cmd_run)

    audit = sub.add_parser("audit-grads", help="finite-difference audit of every backward pass")
    audit.add_argument("--seeds", type=int, default=20)
    audit.add_argument("--seed", type=int, default=0)
    audit.add_argument("--target", action="append", choices=sorted(analysis.AUDITS))
    audit.set_defaults(func=_cmd_audit)

    eq = sub.add_parser("check-equivalence", help="closed-form attention placement check")
    eq.add_argument("--trials", type=int, default=50)
    eq.add_argument("--features", type=int, default=5)
    eq.add_argument("--samples", type=int, default=12)
    eq.add_argument("--seed", type=int, default=0)
    eq.add_argument("--tol", type=float, default=1e-8)
    eq.set_defaults(func=_cmd_equivalence)

    rep = sub.add_parser("report", help="re-render a report from metrics.csv")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--no-plots", action="store_true")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
