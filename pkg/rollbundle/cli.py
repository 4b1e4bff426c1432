"""Command-line interface.

Subcommands:
    run       Simulate one controller on a scenario and write trace, plots and metrics
    report    Recompute metrics from a trace CSV
    bounds    Print the a priori iteration bounds of a scenario
    compare   Run several controllers on one scenario and compare their tracking
    verify    Run the randomized property campaign

Exit codes: 0 success, 1 verification failure, 2 validation error, 3 solver failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from rollbundle import __version__
from rollbundle.config import CONTROLLERS, dump_scenario, load_scenario
from rollbundle.display import create_bar_chart, print_bound_report, print_metrics
from rollbundle.exceptions import (
    BaselineUnavailableError,
    ContractViolation,
    ScenarioValidationError,
    SubproblemFailure,
)
from rollbundle.metrics import compute_metrics
from rollbundle.orchestrator import BundleController, closed_loop, make_controller
from rollbundle.plots import emit_plots
from rollbundle.problem import R2RProblem
from rollbundle.runner import ControllerRunner
from rollbundle.traces import read_trace, write_trace
from rollbundle.verify import run_property_campaign

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INVALID = 2
EXIT_SOLVER_FAILURE = 3


def _write_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    return path


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    controller_kind = args.controller or scenario.controller
    seed = scenario.seed if args.seed is None else args.seed
    out = Path(args.out or scenario.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    problem = R2RProblem(scenario.plant, scenario.problem)
    dump_dir = out / "subproblems" if args.dump_subproblems else None
    controller = make_controller(controller_kind, problem, scenario, seed, monitors=args.monitors, dump_dir=dump_dir)
    trace = closed_loop(controller, problem, scenario, seed)

    dump_scenario(scenario, out / "scenario.json")
    write_trace(trace, out / "trace.csv")
    if len(trace):
        metrics = compute_metrics(trace, scenario)
        _write_json(metrics.as_dict(), out / "metrics.json")
        emit_plots(trace, out / "trace")
        print_metrics(metrics)
    if args.monitors and isinstance(controller, BundleController):
        report = controller.bound_report()
        if report is not None:
            _write_json(report.to_dict(), out / "bounds.json")
            print_bound_report(report, "A posteriori bounds")

    if trace.status != "completed":
        print(f"error: run truncated: {trace.failure}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE
    print(f"Outputs written to {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        trace = read_trace(args.trace)
    except OSError as exc:
        print(f"error: cannot read trace {args.trace}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INVALID
    scenario = load_scenario(args.scenario) if args.scenario else None
    truncated = trace.status != "completed"
    if not len(trace):
        reason = f" (run {trace.status}: {trace.failure})" if truncated else ""
        print(f"error: {args.trace}: trace has no steps{reason}", file=sys.stderr)
        return EXIT_INVALID
    metrics = compute_metrics(trace, scenario)
    if args.json:
        print(json.dumps(metrics.as_dict(), indent=2))
    else:
        print_metrics(metrics)
        if truncated:
            print(f"\nRun {trace.status} after {len(trace)} steps: {trace.failure}")
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    problem = R2RProblem(scenario.plant, scenario.problem)
    controller = make_controller("atbm", problem, scenario)
    tensions, upstream = scenario.horizon_schedule(0)
    report = controller.a_priori_report(scenario.initial_state(), tensions, upstream)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print_bound_report(report, f"A priori bounds: {scenario.name}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    runner = ControllerRunner(scenario, seed=args.seed)
    for kind in args.controllers:
        runner.add_controller(kind)
    baseline = args.baseline if args.baseline in runner.controllers else None
    results = runner.run(baseline=baseline)
    runner.print_comparison()
    print(create_bar_chart(results))
    if args.out:
        out = Path(args.out)
        for name, trace in runner.traces.items():
            write_trace(trace, out / f"{name}.csv")
        _write_json({name: r.as_dict() for name, r in results.items()}, out / "comparison.json")
    if any(trace.status != "completed" for trace in runner.traces.values()):
        return EXIT_SOLVER_FAILURE
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    report = run_property_campaign(args.seed, args.instances, workers=args.workers)
    print(report)
    if report.passed:
        return EXIT_OK
    path = report.write_reproducer(Path(args.reproducer))
    print(f"reproducer written to {path}", file=sys.stderr)
    return EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rollbundle",
        description="Adaptive trajectory-bundle control of roll-to-roll web tension",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one controller on a scenario")
    run.add_argument("--scenario", type=Path, required=True, help="scenario JSON file")
    run.add_argument("--controller", choices=CONTROLLERS, help="controller (default: the scenario's)")
    run.add_argument("--out", type=Path, help="output directory (default: the scenario's output_dir)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--monitors", action="store_true", help="check per-iteration bounds and write bounds.json")
    run.add_argument("--dump-subproblems", action="store_true", help="write every subproblem as JSON")
    run.set_defaults(handler=cmd_run)

    report = sub.add_parser("report", help="recompute metrics from a trace CSV")
    report.add_argument("--trace", type=Path, required=True)
    report.add_argument("--scenario", type=Path, help="scenario supplying constraint limits and event times")
    report.add_argument("--json", action="store_true", help="print metrics as JSON")
    report.set_defaults(handler=cmd_report)

    bounds = sub.add_parser("bounds", help="print the a priori bound report")
    bounds.add_argument("--scenario", type=Path, required=True)
    bounds.add_argument("--json", action="store_true", help="print the report as JSON")
    bounds.set_defaults(handler=cmd_bounds)

    compare = sub.add_parser("compare", help="compare controllers on one scenario")
    compare.add_argument("--scenario", type=Path, required=True)
    compare.add_argument("--controllers", nargs="+", choices=CONTROLLERS, default=list(CONTROLLERS))
    compare.add_argument("--baseline", default="tbm-fixed", help="controller improvements are measured against")
    compare.add_argument("--seed", type=int)
    compare.add_argument("--out", type=Path, help="directory for per-controller traces")
    compare.set_defaults(handler=cmd_compare)

    verify = sub.add_parser("verify", help="run the property campaign")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--instances", type=int, default=50)
    verify.add_argument("--workers", type=int, default=1)
    verify.add_argument("--reproducer", default="reproducer.json", help="where to write the first failure")
    verify.set_defaults(handler=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.handler(args)
    except (ScenarioValidationError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SubproblemFailure, BaselineUnavailableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE


if __name__ == "__main__":
    sys.exit(main())
