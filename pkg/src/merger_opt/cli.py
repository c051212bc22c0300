"""Command line front end.

Exit codes: 0 success, 2 bad input data or files, 3 conflicting
configuration, 4 unexpected internal failure. The MERGER_OPT_LOG
environment variable (DEBUG/INFO/WARNING/ERROR) controls log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Any

from .district import (
    CapacityWarning,
    InstanceFormatError,
    InstanceValidationError,
    load_instance,
)
from .impact import (
    ApportionError,
    ImpactDataError,
    MissingTravelError,
    build_impact_report,
    load_block_weights,
    load_travel_matrix,
    write_impact_csv,
)
from .metrics import MetricsError, district_dissimilarity, district_geary
from .scenarios import (
    InsufficientDataError,
    ScenarioSpecError,
    correlation_report,
    crossover_table,
    load_redistricting_csv,
    load_scenario_spec,
    read_summary_csv,
    run_scenarios,
    summary_rows,
    write_crossover_csv,
    write_summary_csv,
)
from .solver import (
    ConfigConflictError,
    SolveConfig,
    config_from_dict,
    named_objective,
    plan_from_dict,
    solve,
    solve_result_to_dict,
)

log = logging.getLogger(__name__)

_INPUT_ERRORS = (
    InstanceFormatError,
    InstanceValidationError,
    MetricsError,
    ImpactDataError,
    ApportionError,
    MissingTravelError,
    ScenarioSpecError,
    InsufficientDataError,
    FileNotFoundError,
    json.JSONDecodeError,
)


def _pair(text: str) -> tuple[str, str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}")
    return parts[0], parts[1]


def _ratios(text: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for chunk in text.split(","):
        if "=" not in chunk:
            raise argparse.ArgumentTypeError(
                f"expected 'group=ratio[,group=ratio...]', got {text!r}"
            )
        key, _, raw = chunk.partition("=")
        try:
            out[key.strip()] = float(raw)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad ratio {raw!r} for group {key!r}")
    return out


def _add_solve_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; explicit flags override it")
    sub.add_argument("--p-min", type=float, default=None,
                     help="minimum retained share of each school's enrollment")
    sub.add_argument("--no-triples", action="store_true",
                     help="restrict merges to pairs")
    sub.add_argument("--time-limit", type=float, default=None, metavar="SECONDS")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--forbid", type=_pair, action="append", default=[],
                     metavar="A,B", help="keep two schools apart (repeatable)")
    sub.add_argument("--require", type=_pair, action="append", default=[],
                     metavar="A,B", help="pin two schools together (repeatable)")
    sub.add_argument("--objective", choices=["white-vs-poc", "bhwa"], default=None,
                     help="which demographic split the index contrasts")
    sub.add_argument("--interdistrict", action="store_true",
                     help="allow clusters that span district lines")


def _build_config(args: argparse.Namespace, instance) -> SolveConfig:
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        config = config_from_dict(raw, instance)
    else:
        config = SolveConfig()
    updates: dict[str, Any] = {}
    if args.p_min is not None:
        updates["p_min"] = args.p_min
    if args.no_triples:
        updates["allow_triples"] = False
    if args.time_limit is not None:
        updates["time_limit"] = args.time_limit
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.forbid:
        updates["forbidden_pairs"] = frozenset(args.forbid)
    if args.require:
        updates["required_pairs"] = frozenset(args.require)
    if args.interdistrict:
        updates["interdistrict"] = True
    if args.objective is not None:
        updates["objective_partition"] = named_objective(instance, args.objective)
    return replace(config, **updates) if updates else config


def _d_text(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def _describe_plan(result, instance) -> list[str]:
    lines = [f"D {_d_text(result.d_before)} -> {_d_text(result.d_after)} ({result.status})"]
    if result.plan is not None:
        domain = instance.grade_domain
        for cluster in result.plan.multi_clusters():
            parts = []
            for m, sp in zip(cluster.members, cluster.spans):
                parts.append(f"{m} {sp.label(domain) if sp is not None else 'closed'}")
            lines.append("  merge " + " + ".join(cluster.members) + "  [" + " | ".join(parts) + "]")
        if result.plan.is_identity():
            lines.append("  no mergers improve the objective; leaving schools as they are")
    stats = result.stats
    lines.append(
        f"  method={stats.method} nodes={stats.nodes} restarts={stats.restarts}"
        f" time={stats.wall_time:.2f}s"
    )
    return lines


def _cmd_validate(args: argparse.Namespace) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CapacityWarning)
        instance = load_instance(args.instance)
    for w in caught:
        if issubclass(w.category, CapacityWarning):
            print(f"warning: {w.message}")
    d = district_dissimilarity(instance)
    try:
        c: float | None = district_geary(instance)
    except MetricsError:
        c = None
    print(f"{instance.name or Path(args.instance).stem}: ok")
    print(f"  schools={len(instance.schools)} grades={len(instance.grade_domain)}"
          f" edges={len(instance.adjacency)}")
    print(f"  groups={','.join(instance.taxonomy.groups)}"
          f" focal={','.join(instance.taxonomy.focal)}")
    print(f"  D={d:.6f} C={'n/a' if c is None else format(c, '.6f')}")
    return 0


def _cmd_solve(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    config = _build_config(args, instance)
    result = solve(instance, config)
    for line in _describe_plan(result, instance):
        print(line)
    if args.out:
        Path(args.out).write_text(
            json.dumps(solve_result_to_dict(result, instance), indent=2, sort_keys=True)
            + "\n"
        )
        print(f"  plan written to {args.out}")
    return 0


def _cmd_impact(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    plan_data = json.loads(Path(args.plan).read_text())
    plan = plan_from_dict(plan_data, instance)
    taxonomy = named_objective(instance, args.objective) if args.objective else None
    blocks = load_block_weights(args.blocks) if args.blocks else None
    travel = load_travel_matrix(args.travel) if args.travel else None
    report = build_impact_report(
        plan,
        instance,
        taxonomy=taxonomy,
        block_weights=blocks,
        travel=travel,
        opt_out_ratios=args.opt_out_ratios,
    )
    print(f"D {report.d_before:.3f} -> {report.d_after:.3f}")
    print(f"  switchers={report.switch_total:g} ({report.switcher_share:.1%} of enrollment)")
    if report.travel is not None and report.travel.overall is not None:
        ov = report.travel.overall
        print(f"  mean travel {ov.mean_before:.1f} -> {ov.mean_after:.1f} minutes")
    if report.opt_out is not None:
        print(f"  D with opt-out {report.opt_out.d_adjusted:.3f}")
    for note in report.diagnostics:
        print(f"  note: {note}")
    if args.out:
        write_impact_csv(report, args.out)
        print(f"  impact table written to {args.out}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_scenario_spec(args.scenario)
    results = run_scenarios(spec, workers=args.workers)
    out = args.out or "summary.csv"
    write_summary_csv(results, out)
    failures = 0
    for row in summary_rows(results):
        if row["error"]:
            failures += 1
            print(f"{row['instance']} {row['objective']} p_min={row['p_min']}: "
                  f"error: {row['error']}")
        else:
            d_b = _d_text(row["d_before"])
            d_a = _d_text(row["d_after"])
            print(f"{row['instance']} {row['objective']} p_min={row['p_min']}: "
                  f"D {d_b} -> {d_a} ({row['status']})")
    print(f"summary written to {out}" + (f" ({failures} cells failed)" if failures else ""))
    return 0


def _pick_rows(rows: list[dict[str, Any]], args: argparse.Namespace) -> list[dict[str, Any]]:
    """Filter summary rows to one per district for cross-district analyses."""
    picked: list[dict[str, Any]] = []
    seen: set[str] = set()
    for row in rows:
        if row.get("error"):
            continue
        if args.p_min is not None and (row["p_min"] is None or abs(row["p_min"] - args.p_min) > 1e-9):
            continue
        if args.objective is not None and row["objective"] != args.objective:
            continue
        did = row["district_id"]
        if did in seen:
            continue
        seen.add(did)
        picked.append(row)
    return picked


def _cmd_correlate(args: argparse.Namespace) -> int:
    rows = _pick_rows(read_summary_csv(args.summary), args)
    records = []
    for row in rows:
        before, after = row["mean_travel_before"], row["mean_travel_after"]
        records.append(
            {
                "district": row["district_id"],
                "delta_d_relative": row["delta_d_relative"],
                "gearys_c": row["gearys_c"],
                "delta_travel": (after - before) if (before is not None and after is not None) else None,
            }
        )
    report = correlation_report(records)
    pairing = report["c_vs_delta_d"]
    rho = pairing["rho"]
    print(f"n={report['n']} districts")
    if pairing["flag"]:
        print(f"  clustering vs relative D change: {pairing['flag']}")
    else:
        print(f"  clustering vs relative D change: rho={rho:.4f}"
              f" slope={pairing['ols_slope']:.4f}")
    print(f"  lower-median relative D change: {report['median_delta_d_relative']:.4f}")
    out = args.out or "correlations.json"
    Path(out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {out}")
    return 0


def _cmd_crossover(args: argparse.Namespace) -> int:
    merger_rows = _pick_rows(read_summary_csv(args.summary), args)
    redist_rows = load_redistricting_csv(args.redistricting)
    records, diagnostics = crossover_table(merger_rows, redist_rows)
    out = args.out or "crossover.csv"
    write_crossover_csv(records, out)
    print(f"{len(records)} districts joined")
    for note in diagnostics:
        print(f"  {note}")
    print(f"table written to {out}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.data_dir, workers=args.workers)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merger-opt",
        description="School merger planning: solve, measure, and compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check an instance file and report baseline metrics")
    p.add_argument("instance")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("solve", help="find the merger plan minimizing dissimilarity")
    p.add_argument("instance")
    _add_solve_flags(p)
    p.add_argument("--out", help="write the plan JSON here")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("impact", help="student flows, travel, and enrollment effects of a plan")
    p.add_argument("instance")
    p.add_argument("plan", help="plan JSON produced by solve")
    p.add_argument("--blocks", help="CSV of residence-block weights per school and group")
    p.add_argument("--travel", help="CSV of block-to-school travel minutes")
    p.add_argument("--opt-out-ratios", type=_ratios, default=None, metavar="G=R[,G=R...]",
                   help="per-group departure ratios applied to merged schools")
    p.add_argument("--objective", choices=["white-vs-poc", "bhwa"], default=None)
    p.add_argument("--out", help="write the impact CSV here")
    p.set_defaults(func=_cmd_impact)

    p = sub.add_parser("sweep", help="run a scenario file across instances and settings")
    p.add_argument("scenario")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="summary CSV path (default summary.csv)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("correlate", help="cross-district correlations from a sweep summary")
    p.add_argument("summary", help="summary CSV from sweep")
    p.add_argument("--p-min", type=float, default=None, help="keep only this sweep setting")
    p.add_argument("--objective", default=None, help="keep only this objective")
    p.add_argument("--out", help="JSON report path (default correlations.json)")
    p.set_defaults(func=_cmd_correlate)

    p = sub.add_parser("crossover", help="join merger outcomes with redistricting outcomes")
    p.add_argument("summary", help="summary CSV from sweep")
    p.add_argument("redistricting",
                   help="CSV with district_id, delta_d_relative, percent_switching")
    p.add_argument("--p-min", type=float, default=None, help="keep only this sweep setting")
    p.add_argument("--objective", default=None, help="keep only this objective")
    p.add_argument("--out", help="output CSV path (default crossover.csv)")
    p.set_defaults(func=_cmd_crossover)

    p = sub.add_parser("serve", help="run the HTTP API")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--data-dir", default=".", help="directory of instance JSON files")
    p.add_argument("--workers", type=int, default=2, help="concurrent solve jobs")
    p.set_defaults(func=_cmd_serve)

    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("MERGER_OPT_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigConflictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # Plan files that do not match the instance land here.
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("unhandled failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
