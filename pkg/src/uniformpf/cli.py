"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (a filter
underflowed or an assumption checker found a violation).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from uniformpf.diagnostics import (
    EnvelopeViolation,
    ItemViolation,
    check_case_i,
    drift_constants,
    stabilization_ratio,
    tightness_trace,
    to_key_value,
)
from uniformpf.harness.config import ConfigError, build_model, load_config
from uniformpf.harness.plotting import PLOT_KINDS, SchemaError, emit_plot_script
from uniformpf.harness.runner import run_experiment, sweep_uniformity, write_csv, write_trajectories
from uniformpf.models import constant_lyapunov, quadratic_lyapunov

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("uniformpf")


def _load(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f'output_dir="{args.out}"')
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    return load_config(args.config, overrides)


def cmd_simulate(args) -> int:
    path = write_trajectories(_load(args))
    print(path)
    return EXIT_OK


def cmd_compare(args, metrics_override=None) -> int:
    config = _load(args)
    if metrics_override is not None:
        config = config.model_copy(update={"metrics": metrics_override})
    result = run_experiment(config)
    print(result.steps_csv)
    print(result.summary_csv)
    for rep, status in result.failures:
        log.error("replication %d: %s", rep, status)
    return EXIT_NUMERIC if result.failures else EXIT_OK


def cmd_filter(args) -> int:
    return cmd_compare(args, metrics_override=["ess"])


def cmd_sweep(args) -> int:
    config = _load(args)
    sweep = config.sweep
    if sweep is None:
        raise ConfigError([("sweep", "sweep block is required for the sweep command")])
    result = sweep_uniformity(config, sweep.n_values, sweep.t_values, filters=sweep.filters)
    print(result.csv_path)
    return EXIT_NUMERIC if result.failures else EXIT_OK


def cmd_diagnose(args) -> int:
    config = _load(args)
    block = config.diagnose
    if block is None:
        raise ConfigError([("diagnose", "diagnose block is required for the diagnose command")])
    model = build_model(config.model)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if block.kind == "case_i":
        try:
            report = check_case_i(model)
        except (EnvelopeViolation, ValueError) as exc:
            log.error("%s", exc)
            return EXIT_NUMERIC
        (out / "case_i.txt").write_text(to_key_value(report), encoding="utf-8")
        print(out / "case_i.txt")
        return EXIT_OK if report.finite else EXIT_NUMERIC
    lyap = quadratic_lyapunov() if block.lyapunov == "quadratic" else constant_lyapunov()
    trace = tightness_trace(model, lyap, block.n_particles, config.horizon,
                            config.replications, config.seed, threads=config.threads)
    write_csv(out / "tightness.csv", ["k", "lyapunov_avg", "running_max", "predictor_avg"],
              [[t.step, t.lyapunov_avg, t.running_max, t.predictor_avg] for t in trace])
    c1, c2 = drift_constants(trace)
    summary = {"c1": c1, "c2": c2, "max": trace[-1].running_max,
               "stabilization_ratio": stabilization_ratio(trace) if config.horizon >= 4 else float("nan"),
               "n_particles": block.n_particles, "replications": config.replications}
    (out / "tightness.txt").write_text(to_key_value(summary), encoding="utf-8")
    print(out / "tightness.csv")
    return EXIT_OK


def cmd_plot_script(args) -> int:
    print(emit_plot_script(args.csv, args.kind, args.output))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniformpf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML or JSON experiment file")
        p.add_argument("--seed", type=int, help="override the master seed (u64)")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, help="worker threads for replications")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    for name, fn, text in (
        ("simulate", cmd_simulate, "write simulated trajectories"),
        ("filter", cmd_filter, "run the configured filters and record their estimates"),
        ("compare", cmd_compare, "run filters and compare them against the exact reference"),
        ("sweep", cmd_sweep, "time-average error over a grid of N and T"),
        ("diagnose", cmd_diagnose, "tightness trace or Case I envelope check"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("plot-script", help="emit a matplotlib script for a CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", choices=PLOT_KINDS, default="error-vs-time")
    p.add_argument("--output", help="script path (default: next to the CSV)")
    p.set_defaults(func=cmd_plot_script)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ItemViolation, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
