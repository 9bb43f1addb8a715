"""Command-line entry point: ``fedpipe run|validate|bound|sweep <config>``."""
from __future__ import annotations

import argparse
import sys

import yaml

from . import analysis
from .config import parse, read_yaml
from .exceptions import FedPipeError
from .orchestrator import prepare_problem, run_experiment, run_sweep


def _load(path):
    return parse(read_yaml(path))


def _report(errors) -> int:
    print(f"{len(errors)} configuration error(s):", file=sys.stderr)
    for e in errors:
        print(f"  - {e}", file=sys.stderr)
    return 2


def cmd_validate(args) -> int:
    cfg, errors = _load(args.config)
    if errors:
        return _report(errors)
    print(f"{args.config}: valid ({cfg.schedule.total_steps // cfg.schedule.local_steps} rounds, "
          f"{cfg.n_users} users)")
    return 0


def cmd_run(args) -> int:
    cfg, errors = _load(args.config)
    if errors:
        return _report(errors)
    if args.out:
        cfg = cfg.replace(**{"output.dir": args.out})
    result = run_experiment(cfg, resume=args.resume)
    last = result.records[-1] if result.records else None
    for name, path in result.paths.items():
        print(f"{name}: {path}")
    if last is not None:
        print(f"round {last.round}: train_loss={last.train_loss:.6g} test_loss={last.test_loss:.6g} "
              f"test_acc={last.test_acc:.4f} delay_s={last.delay_s:.6g} bits={last.bits}")
    return 0


def cmd_bound(args) -> int:
    cfg, errors = _load(args.config)
    if errors:
        return _report(errors)
    problem = prepare_problem(cfg.replace(**{"analysis.bounds": True}))
    bp = problem.bound_params
    print(f"L={bp.L:.6g} mu={bp.mu:.6g} gamma={bp.gamma:.6g} Gamma={bp.Gamma:.6g} G2={bp.G2:.6g} "
          f"sum_p2_sigma2={bp.weighted_variance:.6g} init_dist={bp.init_dist:.6g}")
    fns = {"fedavg_bound": analysis.fedavg_bound, "uveqfed_bound": analysis.uveqfed_bound,
           "cotaf_bound": analysis.cotaf_bound}
    print(",".join(("T",) + problem.bound_columns))
    E, T = cfg.schedule.local_steps, cfg.schedule.total_steps
    steps = sorted({E * r for r in (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000) if E * r <= T} | {T})
    for t in steps:
        print(",".join([str(t)] + [repr(fns[c](bp.at(t))) for c in problem.bound_columns]))
    return 0


def cmd_sweep(args) -> int:
    cfg, errors = _load(args.config)
    if errors:
        return _report(errors)
    values = [yaml.safe_load(v) for v in args.values.split(",")]
    for value, result in run_sweep(cfg, args.param, values):
        last = result.records[-1]
        print(f"{args.param}={value}: train_loss={last.train_loss:.6g} test_acc={last.test_acc:.4f} "
              f"-> {result.paths['metrics']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpipe", description="Federated learning pipeline simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--out", help="override output.dir")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="check a config file without running it")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("bound", help="print the analytic convergence bounds")
    p.add_argument("config")
    p.set_defaults(func=cmd_bound)
    p = sub.add_parser("sweep", help="run a one-dimensional parameter sweep")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="dotted config path, e.g. encoder.epsilon")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FedPipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
