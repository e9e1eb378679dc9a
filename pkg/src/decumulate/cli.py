"""Command-line front end: reproducible experiment runs with manifests.

Every command writes its outputs plus a ``<out>.run.json`` manifest recording
the resolved configuration, input digests and seeds, so any artifact can be
regenerated byte-for-byte.  Exit codes: 0 success, 2 usage, 3 data
validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, DataError, load_series, stationary_block_bootstrap
from .hjb import (
    ControlsFileError,
    HjbError,
    HjbSolver,
    TabulatedPolicy,
    default_grid,
    load_controls,
    save_controls,
)
from .market import (
    CRSP_MARKET,
    MarketParams,
    PathFileError,
    export_pathset_csv,
    load_pathset,
    save_pathset,
    simulate_paths,
)
from .objective import (
    FRONTIER_CSV_HEADER,
    evaluate_policy,
    heatmap_report,
    percentile_report,
    rollout,
    write_heatmap_csv,
    write_percentile_csv,
)
from .policy import CheckpointError, load_checkpoint, save_checkpoint
from .scenario import ScenarioConfig
from .trainer import TrainConfig, TrainingError, frontier_sweep, prepare_cold_pair, train

USAGE_ERROR = 2
DATA_ERROR = 3
NUMERICAL_ERROR = 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("DECUMULATE_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def _write_manifest(args, config: dict, inputs: list, outputs: list, t0: float) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": time.time() - t0,
    }
    with open(f"{args.out_manifest}", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _scenario_from(args) -> ScenarioConfig:
    """CLI flags > scenario JSON > built-in base-case defaults."""
    base = ScenarioConfig().to_dict()
    if getattr(args, "scenario", None):
        loaded = _load_json(args.scenario)
        unknown = set(loaded) - set(base)
        if unknown:
            raise DataError(f"{args.scenario}: unknown scenario fields {sorted(unknown)}")
        base.update(loaded)
    if getattr(args, "kappa", None) is not None:
        base["kappa"] = args.kappa
    return ScenarioConfig.from_dict(base)


def _market_from(args) -> MarketParams:
    if getattr(args, "params", None):
        return MarketParams.from_dict(_load_json(args.params))
    return CRSP_MARKET


def _train_config_from(args) -> TrainConfig:
    cfg = TrainConfig()
    overrides = {}
    for flag, name in (("iterations", "n_iterations"), ("batch_size", "batch_size"),
                       ("lr_params", "lr_params"), ("lr_wstar", "lr_wstar"),
                       ("weight_decay", "weight_decay"), ("eval_every", "eval_every"),
                       ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides)


def _check_horizon(scenario: ScenarioConfig, paths, what: str) -> None:
    if paths.n_periods != scenario.n_rebalances:
        raise DataError(
            f"scenario mismatch: {what} expects n_rebalances={scenario.n_rebalances} "
            f"but the path file has n_periods={paths.n_periods}")


def _positive(kind):
    def convert(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return convert


def cmd_simulate(args) -> int:
    t0 = time.time()
    market = _market_from(args)
    paths = simulate_paths(market, args.paths, args.periods, args.dt, args.seed)
    save_pathset(paths, args.out)
    outputs = [args.out]
    if args.csv:
        export_pathset_csv(paths, args.csv)
        outputs.append(args.csv)
    config = {"market": market.to_dict(), "n_paths": args.paths, "n_periods": args.periods,
              "dt": args.dt, "seed": args.seed}
    _write_manifest(args, config, [args.params] if args.params else [], outputs, t0)
    return 0


def cmd_bootstrap(args) -> int:
    t0 = time.time()
    series = load_series(args.series)
    config = BootstrapConfig(expected_block_months=args.block_months, n_paths=args.paths,
                             n_rebalances=args.rebalances,
                             periods_per_rebalance=args.months_per_period, seed=args.seed)
    paths = stationary_block_bootstrap(series, config)
    save_pathset(paths, args.out)
    _write_manifest(args, vars(config).copy(), [args.series], [args.out], t0)
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    scenario = _scenario_from(args)
    market = _market_from(args)
    paths = load_pathset(args.paths)
    _check_horizon(scenario, paths, "training")
    config = _train_config_from(args)
    if args.warm:
        start = load_checkpoint(args.warm)
        mismatched = [name for name in ("horizon", "n_rebalances", "w0", "q_min",
                                        "q_max", "alpha")
                      if getattr(start.scenario, name) != getattr(scenario, name)]
        if mismatched:
            raise DataError(f"warm checkpoint {args.warm} disagrees with the requested "
                            f"scenario on fields: {', '.join(mismatched)}")
        start = replace_scenario(start, scenario)
    else:
        start = prepare_cold_pair(paths, scenario, config.seed, market)
    log_fh = open(args.log, "w") if args.log else None
    if log_fh:
        log_fh.write("iter,batch_obj,full_obj_if_evaluated,lr,w_star\n")
    try:
        best = train(start, paths, scenario, config, market, log_file=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(best, args.out)
    point = evaluate_policy(best, paths, scenario, best.w_star, market)
    print(FRONTIER_CSV_HEADER)
    print(point.as_row())
    inputs = [args.paths] + ([args.warm] if args.warm else [])
    _write_manifest(args, {"scenario": scenario.to_dict(), "train": vars(config).copy(),
                           "market": market.to_dict()},
                    inputs, [args.out] + ([args.log] if args.log else []), t0)
    return 0


def replace_scenario(pair, scenario):
    from .policy import PolicyPair

    return PolicyPair(pair.q_net, pair.p_net, pair.stats, pair.w_star, scenario, pair.seed)


def cmd_frontier(args) -> int:
    t0 = time.time()
    scenario = _scenario_from(args)
    market = _market_from(args)
    paths = load_pathset(args.paths)
    _check_horizon(scenario, paths, "frontier training")
    eval_paths = load_pathset(args.eval_paths) if args.eval_paths else None
    config = _train_config_from(args)
    kappas = [float(k) for k in args.kappas.split(",")]
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    points, _ = frontier_sweep(kappas, paths, scenario, config, market,
                               eval_paths=eval_paths, checkpoint_dir=args.out_dir,
                               progress=lambda pt: print(pt.as_row(), flush=True))
    rows = [pt.as_row() for pt in points]
    frontier_csv = os.path.join(args.out_dir, "frontier.csv")
    with open(frontier_csv, "w") as fh:
        fh.write(FRONTIER_CSV_HEADER + "\n")
        fh.write("\n".join(rows) + "\n")
    inputs = [args.paths] + ([args.eval_paths] if args.eval_paths else [])
    _write_manifest(args, {"scenario": scenario.to_dict(), "train": vars(config).copy(),
                           "kappas": kappas}, inputs, [frontier_csv], t0)
    return 0


def cmd_hjb(args) -> int:
    t0 = time.time()
    scenario = _scenario_from(args)
    market = _market_from(args)
    grid = default_grid(args.grid)
    solver = HjbSolver(scenario, market, grid, workers=_threads(args))
    if args.wstar is not None:
        value, vg = solver.solve_fixed_wstar(args.wstar)
        w_star = args.wstar
    else:
        value, w_star, vg = solver.optimize_wstar(golden_tol=args.golden_tol)
    save_controls(vg.controls, args.out)
    print(f"value_t0={value!r} w_star={w_star!r}")
    _write_manifest(args, {"scenario": scenario.to_dict(), "grid": grid.to_dict(),
                           "market": market.to_dict(), "value_t0": value,
                           "w_star": w_star},
                    [], [args.out], t0)
    return 0


def _load_policy(args):
    """(policy, scenario, w_star, label) from --model or --controls."""
    if args.model:
        pair = load_checkpoint(args.model)
        return pair, pair.scenario, pair.w_star, args.model
    controls = load_controls(args.controls)
    return TabulatedPolicy(controls), controls.scenario, controls.w_star, args.controls


def cmd_eval(args) -> int:
    t0 = time.time()
    policy, scenario, w_star, label = _load_policy(args)
    paths = load_pathset(args.paths)
    _check_horizon(scenario, paths, label)
    market = _market_from(args)
    point = evaluate_policy(policy, paths, scenario, w_star, market)
    print(FRONTIER_CSV_HEADER)
    print(point.as_row())
    with open(args.out, "w") as fh:
        fh.write(FRONTIER_CSV_HEADER + "\n")
        fh.write(point.as_row() + "\n")
    _write_manifest(args, {"scenario": scenario.to_dict(), "w_star": w_star},
                    [label, args.paths], [args.out], t0)
    return 0


def _parse_grid(spec: str, log_spaced: bool = False) -> np.ndarray:
    try:
        lo, hi, n = spec.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise DataError(f"bad grid spec {spec!r}, want lo:hi:count") from None
    if log_spaced:
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


def cmd_report(args) -> int:
    t0 = time.time()
    policy, scenario, w_star, label = _load_policy(args)
    market = _market_from(args)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    inputs = [label]
    wealth = _parse_grid(args.wealth_grid)
    times_idx = np.arange(scenario.n_rebalances + 1)
    times = scenario.rebalance_times()
    p_map, q_map = heatmap_report(policy, scenario, wealth, times_idx)
    for name, mat in (("heatmap_stock_fraction.csv", p_map),
                      ("heatmap_withdrawal.csv", q_map)):
        out = os.path.join(args.out_dir, name)
        write_heatmap_csv(mat, wealth, times, out)
        outputs.append(out)
    if args.paths:
        paths = load_pathset(args.paths)
        _check_horizon(scenario, paths, label)
        inputs.append(args.paths)
        res = rollout(policy, paths, scenario, market, keep_traces=True)
        tables = percentile_report(res)
        for name, table in tables.items():
            out = os.path.join(args.out_dir, f"percentiles_{name}.csv")
            write_percentile_csv(table, times, out)
            outputs.append(out)
    _write_manifest(args, {"scenario": scenario.to_dict(), "w_star": w_star,
                           "wealth_grid": args.wealth_grid}, inputs, outputs, t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decumulate",
        description="Optimal decumulation: simulation, bootstrap, policy training, "
                    "dynamic-programming solves and reports.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, scenario=True, market=True):
        p.add_argument("--threads", type=_positive(int),
                       help="worker threads for FFTs (default: DECUMULATE_THREADS or all cores)")
        p.add_argument("--manifest", dest="out_manifest",
                       help="run manifest path (default: <out>.run.json)")
        if scenario:
            p.add_argument("--scenario", help="scenario JSON overriding the base-case defaults")
        if market:
            p.add_argument("--params", help="market parameter JSON (default: built-in calibration)")

    p = sub.add_parser("simulate", help="sample jump-diffusion return paths")
    p.add_argument("--paths", type=_positive(int), required=True)
    p.add_argument("--periods", type=_positive(int), required=True)
    p.add_argument("--dt", type=_positive(float), default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export paths as CSV")
    add_common(p, scenario=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bootstrap", help="stationary block bootstrap of a monthly series")
    p.add_argument("--series", required=True, help="monthly return CSV")
    p.add_argument("--block-months", type=_positive(float), required=True)
    p.add_argument("--paths", type=_positive(int), required=True)
    p.add_argument("--rebalances", type=_positive(int), default=30)
    p.add_argument("--months-per-period", type=_positive(int), default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    add_common(p, scenario=False, market=False)
    p.set_defaults(func=cmd_bootstrap)

    def add_train_flags(p):
        p.add_argument("--iterations", type=_positive(int))
        p.add_argument("--batch-size", dest="batch_size", type=_positive(int))
        p.add_argument("--lr-params", dest="lr_params", type=_positive(float))
        p.add_argument("--lr-wstar", dest="lr_wstar", type=_positive(float))
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--eval-every", dest="eval_every", type=_positive(int))
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the policy pair at one kappa")
    p.add_argument("--paths", required=True, help="training PathSet file")
    p.add_argument("--kappa", type=float, help="risk weight ('inf' for the pure-shortfall mode)")
    p.add_argument("--warm", help="checkpoint to warm-start from")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="training log CSV")
    add_train_flags(p)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("frontier", help="train an ascending kappa sweep with transfer learning")
    p.add_argument("--paths", required=True)
    p.add_argument("--kappas", required=True, help="comma-separated ascending kappa values")
    p.add_argument("--eval-paths", dest="eval_paths", help="PathSet for reporting (default: training paths)")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    add_train_flags(p)
    add_common(p)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("hjb", help="dynamic-programming solve with stored controls")
    p.add_argument("--kappa", type=float)
    p.add_argument("--grid", type=_positive(int), default=512, help="nodes per log-asset axis")
    p.add_argument("--wstar", type=float, help="skip the outer search and fix W*")
    p.add_argument("--golden-tol", dest="golden_tol", type=_positive(float), default=0.25)
    p.add_argument("--out", required=True, help="stored-controls output file")
    add_common(p)
    p.set_defaults(func=cmd_hjb)

    p = sub.add_parser("eval", help="evaluate a checkpoint or stored controls on a PathSet")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", help="policy checkpoint")
    g.add_argument("--controls", help="stored-controls file")
    p.add_argument("--paths", required=True)
    p.add_argument("--out", required=True, help="evaluation CSV")
    add_common(p, scenario=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="heat maps and on-path percentiles for a policy")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--controls")
    p.add_argument("--paths", help="PathSet for on-path percentile tables")
    p.add_argument("--wealth-grid", dest="wealth_grid", default="10:1500:64",
                   help="heat-map wealth grid as lo:hi:count")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    add_common(p, scenario=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out_manifest", None) is None:
        anchor = getattr(args, "out", None) or getattr(args, "out_dir", None) or args.command
        args.out_manifest = f"{anchor}.run.json"
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (DataError, PathFileError, CheckpointError, ControlsFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (HjbError, TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
