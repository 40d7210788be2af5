"""CLI interface for mlkbf."""

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import structlog

from ..core.enkbf import Variant, enkbf_run
from ..core.errors import MLKBFError, NonFiniteTheta
from ..core.kalman import exact_log_nc, kbf_run
from ..core.model import ModelFamily, ModelSpec
from ..core.multilevel import MLConfig, ml_log_nc
from ..core.paths import Branch, IncrementPath, SeedSpec, simulate_truth_and_obs
from ..harness.estimation import run_estimation, summarize_runs, synthetic_record
from ..harness.executor import RepetitionExecutor
from ..harness.rates import run_rate_experiment, summarize
from ..utils.config import ModelConfig, load_config
from ..utils.logging import configure_logging
from ..utils.records import (
    RecordSink,
    kbf_frame,
    read_observations,
    summary_frame,
    trace_frame,
    trajectory_frame,
    write_frame,
    write_observations,
    write_sidecar,
)

logger = structlog.get_logger(__name__)

RECORD_COLUMNS = ["estimator", "variant", "L", "mse", "cost", "full_cost", "repetitions"]


def _model_config(value: str, c_seed: Optional[int]) -> ModelConfig:
    """A preset name or the path of a YAML config with a 'model' section."""
    if Path(value).is_file():
        model = load_config(value).model
    else:
        model = ModelConfig(preset=value)
    if c_seed is not None:
        model = model.model_copy(update={"c_seed": c_seed})
    return model


def _load_data(directory: str) -> tuple[ModelSpec, IncrementPath]:
    obs, header = read_observations(directory)
    model_cfg = ModelConfig.model_validate(header["model"])
    family = model_cfg.family()
    return family(header.get("theta", family.default_theta)), obs


def cmd_gen_data(args) -> None:
    model_cfg = _model_config(args.model, args.c_seed)
    if args.no_observation_noise:
        model_cfg = model_cfg.model_copy(update={"observation_noise": False})
    family = model_cfg.family()
    theta = tuple(args.theta) if args.theta else model_cfg.theta_values(family)
    _, obs = simulate_truth_and_obs(family(theta), args.level, args.horizon, SeedSpec(args.seed, branch=Branch.DATA))
    header = {
        "model": model_cfg.header(family),
        "theta": [float(v) for v in theta],
        "seed": args.seed,
    }
    write_observations(args.out, obs, header)
    print(f"Wrote {obs.steps} increments at level {obs.level.l} to {args.out}")


def cmd_kbf(args) -> None:
    model, obs = _load_data(args.data)
    path = kbf_run(model, obs, args.level)
    u = exact_log_nc(path.means, obs, model, args.level)
    if args.dump:
        write_frame(kbf_frame(path.means, path.covs), args.dump)
    write_frame(pd.DataFrame([{"level": args.level, "steps": len(path.means) - 1, "log_nc": u}]), sys.stdout)


def cmd_nc(args) -> None:
    model, obs = _load_data(args.data)
    variant = Variant.parse(args.variant)
    run = enkbf_run(model, obs, args.level, args.particles, variant, SeedSpec(args.seed, branch=Branch.ESTIMATOR))
    if args.trace:
        write_frame(trace_frame(run.log_nc.cumulative(), run.mean_path), args.trace)
        write_sidecar(args.trace, {"variant": variant.value, "level": args.level, "particles": args.particles,
                                   "seed": args.seed})
    row = {"variant": variant.value, "level": args.level, "particles": args.particles, "seed": args.seed,
           "log_nc": run.u}
    write_frame(pd.DataFrame([row]), sys.stdout)


def cmd_ml_nc(args) -> None:
    model, obs = _load_data(args.data)
    config = MLConfig.from_allocation(args.c0, args.lstar, args.L, args.variant)
    estimate = ml_log_nc(model, obs, config, SeedSpec(args.seed, branch=Branch.ESTIMATOR))
    rows = [
        {
            "level": t.level,
            "N": t.N,
            "u_fine": t.u_fine,
            "u_coarse": np.nan if t.u_coarse is None else t.u_coarse,
            "contribution": t.contribution,
            "cost": t.cost,
            "fine_cost": t.fine_cost,
        }
        for t in estimate.terms
    ]
    rows.append({"level": "total", "N": config.total_particles, "u_fine": np.nan, "u_coarse": np.nan,
                 "contribution": estimate.u_ml, "cost": estimate.cost, "fine_cost": estimate.fine_cost})
    write_frame(pd.DataFrame(rows), args.out or sys.stdout)


def cmd_rates(args) -> None:
    config = load_config(args.config)
    if config.rates is None:
        raise ValueError("config has no 'rates' section")
    experiment = config.rates.to_experiment()
    family = config.model.family()
    model = family(config.model.theta_values(family))
    _, obs = simulate_truth_and_obs(model, config.data_level(), config.data.horizon,
                                    SeedSpec(config.data.seed, branch=Branch.DATA))
    with open(args.out, "w", newline="") as out:
        records = run_rate_experiment(experiment, model, obs, RepetitionExecutor(args.jobs),
                                      sink=RecordSink(out, RECORD_COLUMNS))
    for summary in summarize(records):
        logger.info("rate_slopes", variant=summary.variant, sl_slope=summary.sl_slope, ml_slope=summary.ml_slope)
    print(f"Wrote {len(records)} records to {args.out}")


def cmd_estimate(args) -> None:
    config = load_config(args.config)
    family: ModelFamily = config.model.family(config.ml.variant)
    spsa = config.spsa_config(family)
    theta_star = config.data.theta_star or list(config.model.theta_values(family))
    horizon = max(config.data.horizon, spsa.M)
    obs = synthetic_record(family, theta_star, config.data_level(), horizon, config.data.seed)
    try:
        trajectories = run_estimation(family, obs, spsa, config.spsa.runs, RepetitionExecutor(args.jobs))
    except NonFiniteTheta as e:
        if e.trajectory is not None:
            write_frame(trajectory_frame([e.trajectory]), args.out)
            logger.error("partial_trajectory_written", out=args.out, run=e.trajectory.run,
                         iterations=len(e.trajectory.iterates))
        raise
    write_frame(trajectory_frame(trajectories), args.out)
    summary = summarize_runs(trajectories)
    if args.summary:
        write_frame(summary_frame(summary), args.summary)
    print(f"Final mean estimate: {summary.final.to_dict()}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlkbf", description="Multilevel ensemble Kalman-Bucy filtering")
    parser.add_argument("--log-level", help="debug, info, warning or error (default: $MLKBF_LOG or warning)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Simulate a signal and write its observation record")
    p.add_argument("--model", required=True, help="Preset name (ou1, ou5, lin2, l63, l96) or config file")
    p.add_argument("--theta", type=float, nargs="+", help="Parameter values (default: preset values)")
    p.add_argument("--c-seed", type=int, help="Seed of a random observation matrix")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--no-observation-noise", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("kbf", help="Reference Kalman-Bucy filter and its log normalizing constant")
    p.add_argument("--data", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--dump", help="Write k, means and covariance diagonals to this CSV")
    p.set_defaults(func=cmd_kbf)

    p = sub.add_parser("nc", help="Single-level EnKBF log normalizing constant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="f1", choices=[v.value for v in Variant])
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--particles", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trace", help="Write step, U and ensemble means to this CSV")
    p.set_defaults(func=cmd_nc)

    p = sub.add_parser("ml-nc", help="Multilevel EnKBF log normalizing constant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default="f1", choices=[v.value for v in Variant])
    p.add_argument("--lstar", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--c0", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="Per-level CSV (default: stdout)")
    p.set_defaults(func=cmd_ml_nc)

    p = sub.add_parser("rates", help="MSE-versus-cost records for SL and ML estimators")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, help="Worker count (default: $MLKBF_THREADS)")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("estimate", help="Online parameter estimation with RML-SPSA")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="Write per-iteration mean and std across runs to this CSV")
    p.add_argument("--jobs", type=int, help="Worker count (default: $MLKBF_THREADS)")
    p.set_defaults(func=cmd_estimate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        args.func(args)
    except (MLKBFError, ValueError, OSError) as e:
        logger.error("command_failed", command=args.command, error=str(e))
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
    return 0


if __name__ == "__main__":
    main()
