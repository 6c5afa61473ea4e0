"""Command line entry point: ``rltmle {run,report,envs,simulate,estimate}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .exceptions import ConfigurationError
from .environments import ENVIRONMENTS, make_environment
from .harness import ESTIMATOR_KEYS, ExperimentConfig, TrialContext, run_estimator, emit_report, preset, run_experiment
from .mdp import Dataset, DiscountSpec, exact_policy_value, simulate
from .model import inject_bias, model_based_q


class UsageError(Exception):
    """Bad invocation; reported with exit status 2."""


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _str_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


# config field -> (flag, argparse type)
_OVERRIDES = {
    "environment": ("--environment", str),
    "horizon": ("--horizon", int),
    "gamma": ("--gamma", float),
    "sample_sizes": ("--sample-sizes", _int_list),
    "scales": ("--scales", _float_list),
    "trials": ("--trials", int),
    "estimators": ("--estimators", _str_list),
    "B": ("--B", int),
    "ci_level": ("--ci-level", float),
    "seed": ("--seed", int),
    "output": ("--output", str),
    "split_fraction": ("--split-fraction", float),
    "smoothing": ("--smoothing", float),
    "folds": ("--folds", int),
    "q_source": ("--q-source", str),
    "workers": ("--workers", int),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rltmle", description="Off-policy evaluation benchmark harness.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep described by a JSON config")
    run.add_argument("config", nargs="?", help="config file; omit with --preset")
    run.add_argument("--preset", choices=sorted(ENVIRONMENTS), help="start from a built-in desk-scale config")
    for name, (flag, typ) in _OVERRIDES.items():
        run.add_argument(flag, dest=name, type=typ, default=None, help=f"override config field {name}")
    run.add_argument("--record-timing", dest="record_timing", action="store_true", default=None,
                     help="store wall times (results are then no longer byte-reproducible)")
    run.add_argument("--report", action="store_true", help="also write the CSV and JSON summary")

    rep = sub.add_parser("report", help="summarize a results file into CSV and JSON")
    rep.add_argument("results")
    rep.add_argument("--csv", default=None)
    rep.add_argument("--json", default=None)

    envs = sub.add_parser("envs", help="list environments or export one as JSON")
    envs.add_argument("--export", metavar="NAME", default=None)
    envs.add_argument("--horizon", type=int, default=None)

    sim = sub.add_parser("simulate", help="write a dataset of trajectories as JSON lines")
    sim.add_argument("--env", required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--horizon", type=int, default=None)
    sim.add_argument("--policy", choices=("behavior", "evaluation"), default="behavior")
    sim.add_argument("--out", required=True)

    est = sub.add_parser("estimate", help="run estimators once on a dataset file")
    est.add_argument("--env", required=True)
    est.add_argument("--data", required=True, help="JSON lines of trajectories logged under the behavior policy")
    est.add_argument("--estimators", type=_str_list, default=["dm", "wdr", "ltmle"])
    est.add_argument("--gamma", type=float, default=1.0)
    est.add_argument("--split-fraction", type=float, default=0.5)
    est.add_argument("--scale", type=float, default=0.0, help="misspecification noise added to the fitted Q")
    est.add_argument("--B", type=int, default=200)
    est.add_argument("--ci-level", type=float, default=0.1)
    est.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(args) -> int:
    if args.config and args.preset:
        raise UsageError("give either a config file or --preset, not both")
    if args.preset:
        base = preset(args.preset).to_dict()
    elif args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            base = ExperimentConfig.from_file(args.config).to_dict()
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from exc
    else:
        raise UsageError("run needs a config file or --preset")
    for name in list(_OVERRIDES) + ["record_timing"]:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    try:
        cfg = ExperimentConfig.from_dict(base)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    out = run_experiment(cfg)
    print(f"results: {out}")
    if args.report:
        csv_path, json_path = emit_report(out)
        print(f"csv: {csv_path}\nsummary: {json_path}")
    return 0


def _cmd_report(args) -> int:
    if not Path(args.results).is_file():
        raise UsageError(f"results file not found: {args.results}")
    csv_path, json_path = emit_report(args.results, args.csv, args.json)
    print(csv_path.read_text(), end="")
    print(f"summary: {json_path}", file=sys.stderr)
    return 0


def _cmd_envs(args) -> int:
    if args.export:
        try:
            env = make_environment(args.export, args.horizon)
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from exc
        print(json.dumps(env.to_dict(), indent=2))
        return 0
    for name in ENVIRONMENTS:
        env = make_environment(name)
        print(f"{name}\tstates={env.mdp.num_states}\tactions={env.mdp.num_actions}\thorizon={env.default_horizon}")
    return 0


def _environment(name: str, horizon=None):
    try:
        return make_environment(name, horizon)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_simulate(args) -> int:
    env = _environment(args.env, args.horizon)
    policy = env.behavior if args.policy == "behavior" else env.evaluation
    data = simulate(env.mdp, policy, env.default_horizon, args.n, args.seed)
    data.to_jsonl(args.out)
    print(f"wrote {data.n} trajectories of length {data.horizon} to {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    unknown = [k for k in args.estimators if k not in ESTIMATOR_KEYS]
    if unknown:
        raise UsageError(f"unknown estimator keys {unknown}; choose from {list(ESTIMATOR_KEYS)}")
    if not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    env = _environment(args.env)
    data = Dataset.from_jsonl(args.data, env.mdp)
    T = data.horizon
    env = _environment(args.env, T)
    discount = DiscountSpec(args.gamma)
    cfg = ExperimentConfig(environment=args.env, horizon=T, gamma=args.gamma, estimators=args.estimators,
                           B=args.B, ci_level=args.ci_level, split_fraction=args.split_fraction, seed=args.seed)
    fit, target = data.split(args.split_fraction)

    def procedure(sub):
        return inject_bias(model_based_q(sub, env.mdp, env.evaluation, T, discount), args.scale, args.seed)

    ctx = TrialContext(env, data, target, procedure(fit), procedure, discount, cfg.triples(), args.B,
                       args.ci_level, cfg.ltmle_config(), (args.seed, 0, 0, 0))
    out = {"truth": exact_policy_value(env.mdp, env.evaluation, T, discount), "estimates": {}}
    for key in args.estimators:
        out["estimates"][key] = run_estimator(key, ctx)[0]
    print(json.dumps(out, indent=2))
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "report": _cmd_report,
    "envs": _cmd_envs,
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"rltmle: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"rltmle: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
