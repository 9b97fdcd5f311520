"""
Command-line entry point.

    python pipeline.py run --preset paper-week --out runs/week
    python pipeline.py run --config configs/tiny_e2e.yaml --seed 3 --mode materialized --set overlay.n=7
    python pipeline.py report --log runs/week --format csv
    python pipeline.py verify --archive runs/tiny/archive
    python pipeline.py presets

Exit codes: 0 every invariant held, 2 an invariant was violated, 1 config or I/O error.
"""
import argparse
import logging
import os
import sys

import pandas as pd

from cloud_store import archive_chain, load_archive, save_archive, verify_consistency
from core_types import verify_chain
from errors import ChainSplitterError, InvariantViolation
from metrics import build_summary, emit_report, load_metrics
from sim_harness import BASE_DIR, Simulation, list_presets, load_config, preset_path, run_sweep

logger = logging.getLogger("pipeline")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2

DEFAULT_OUT = os.path.join(BASE_DIR, "runs")
LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


# -------------------------
# Commands
# -------------------------
def cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"scenario.seed={args.seed}")
    if args.mode is not None:
        overrides.append(f"scenario.mode={args.mode}")
    path = args.config if args.config else preset_path(args.preset or "default")
    cfg = load_config(path, overrides)
    out_dir = args.out or os.path.join(DEFAULT_OUT, cfg.scenario.name)
    os.makedirs(out_dir, exist_ok=True)

    if cfg.scenario.sweep_seeds > 0:
        rows = run_sweep(cfg)
        sweep_path = os.path.join(out_dir, "sweep.csv")
        pd.DataFrame(rows).to_csv(sweep_path, index=False)
        print(f"[Run] {len(rows)} seeds, no conflicting finalization -> {sweep_path}")
        return EXIT_OK

    sim = Simulation(cfg)
    log = sim.run()
    written = emit_report(log, out_dir, args.format)
    if cfg.materialized:
        archive_dir = save_archive(sim.archive, os.path.join(out_dir, "archive"))
        written.append(archive_dir)
    summary = build_summary(log)
    print(f"[Run] {cfg.scenario.name}: height {summary['final_height']}, "
          f"peak local {summary['peak_local_bytes']} B, cloud {summary['final_cloud_bytes']} B")
    for path in written:
        print(f"[Run] wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = os.path.join(args.log, "metrics.json") if os.path.isdir(args.log) else args.log
    if not os.path.isfile(path):
        print(f"[Report] {path} not found; only runs that include --format json save metrics.json")
        return EXIT_ERROR
    log = load_metrics(path)
    out_dir = args.out or (args.log if os.path.isdir(args.log) else os.path.dirname(args.log))
    for written in emit_report(log, out_dir, args.format):
        print(f"[Report] wrote {written}")
    return EXIT_OK


def cmd_verify(args) -> int:
    archive = load_archive(args.archive)
    consistency = verify_consistency(archive)
    report = verify_chain(archive_chain(archive), scheme=archive.scheme)
    print(f"[Verify] {len(report.checks)} blocks, head {archive.head_height}, "
          f"replicas {'consistent' if consistency.consistent else 'DIVERGENT'}")
    if not report.passed:
        bad = [c.height for c in report.checks if not c.ok]
        print(f"[Verify] chain fails at heights {bad[:10]}")
        return EXIT_INVARIANT
    if not consistency.consistent:
        print(f"[Verify] divergent replicas: {', '.join(consistency.divergent_replicas)}")
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, description in list_presets():
        print(f"{name:16s} {description}")
    return EXIT_OK


# -------------------------
# Parser
# -------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipeline", description="Hierarchical blockchain storage simulator")
    parser.add_argument("--log-level", default="INFO", type=str.upper, choices=LOG_LEVELS,
                        help="root logger level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario, or a seed sweep")
    source = run.add_mutually_exclusive_group()
    source.add_argument("--config", help="scenario YAML file")
    source.add_argument("--preset", help="built-in scenario name (see `presets`)")
    run.add_argument("--seed", type=int)
    run.add_argument("--mode", choices=["accounting", "materialized"])
    run.add_argument("--out", help="output directory")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    run.add_argument("--format", nargs="+", default=["csv", "json", "dat"], choices=["csv", "json", "dat"])
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report", help="re-render reports from a saved metrics.json")
    report.add_argument("--log", required=True, help="run directory or metrics.json")
    report.add_argument("--format", nargs="+", default=["csv", "json"], choices=["csv", "json", "dat"])
    report.add_argument("--out")
    report.set_defaults(func=cmd_report)

    verify = sub.add_parser("verify", help="verify a saved materialized archive")
    verify.add_argument("--archive", required=True)
    verify.set_defaults(func=cmd_verify)

    presets = sub.add_parser("presets", help="list built-in scenarios")
    presets.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        logger.error("[Pipeline] invariant violation: %s", exc)
        return EXIT_INVARIANT
    except (ChainSplitterError, OSError) as exc:
        logger.error("[Pipeline] %s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
