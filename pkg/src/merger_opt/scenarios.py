"""Batch orchestration: sweeps, fused districts, correlations, crossover.

A scenario spec lists instance files, a base solve configuration, sweep axes
(p_min values, objective names), and optionally a fused multi-district cell.
Each cell is one (instance, objective, p_min) solve plus its impact report;
cells fail independently, and the batch assembles results in spec order so
summary files are byte-stable across runs.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .district import (
    DistrictInstance,
    InstanceValidationError,
    load_instance,
    normalize_pair,
)
from .impact import (
    BlockWeights,
    ImpactReport,
    TravelMatrix,
    build_impact_report,
    load_block_weights,
    load_travel_matrix,
)
from .metrics import MetricsError, district_geary
from .solver import (
    SolveConfig,
    SolveResult,
    config_from_dict,
    named_objective,
    solve,
)

log = logging.getLogger(__name__)


class ScenarioSpecError(ValueError):
    """The scenario spec file is malformed."""


class InsufficientDataError(ValueError):
    """Too few districts for a correlation."""


def lower_median(values: Sequence[float]) -> float:
    """Median taking the lower of the two middle values for even counts."""
    if not values:
        raise ValueError("median of empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass(frozen=True)
class InstanceRef:
    path: str
    blocks: str | None = None
    travel: str | None = None


@dataclass(frozen=True)
class FusedSpec:
    name: str
    instance_paths: tuple[str, ...]
    cross_adjacency: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class ScenarioSpec:
    instances: tuple[InstanceRef, ...]
    base: SolveConfig
    p_min_values: tuple[float, ...]
    objectives: tuple[str, ...]
    fused: FusedSpec | None = None


def load_scenario_spec(path: str | Path) -> ScenarioSpec:
    """Parse a scenario spec JSON file; paths stay relative to the spec."""
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ScenarioSpecError(f"cannot read scenario spec {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioSpecError(f"scenario spec {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ScenarioSpecError("scenario spec must be a JSON object")

    raw_instances = data.get("instances")
    if not isinstance(raw_instances, list) or not raw_instances:
        raise ScenarioSpecError("scenario spec needs a non-empty instances list")
    base_dir = p.parent

    def resolve(ref: str | None) -> str | None:
        if ref is None:
            return None
        q = Path(ref)
        return str(q if q.is_absolute() else base_dir / q)

    refs = []
    for item in raw_instances:
        if isinstance(item, str):
            refs.append(InstanceRef(path=resolve(item)))
        elif isinstance(item, Mapping) and "path" in item:
            refs.append(
                InstanceRef(
                    path=resolve(item["path"]),
                    blocks=resolve(item.get("blocks")),
                    travel=resolve(item.get("travel")),
                )
            )
        else:
            raise ScenarioSpecError(f"bad instance entry: {item!r}")

    base = config_from_dict(data.get("config", {}))
    sweep = data.get("sweep", {})
    p_values = tuple(sweep.get("p_min", [base.p_min]))
    for v in p_values:
        if not (isinstance(v, (int, float)) and 0 <= v <= 1):
            raise ScenarioSpecError(f"sweep p_min value {v!r} outside [0, 1]")
    objectives = tuple(data.get("objectives", ["white-vs-poc"]))

    fused = None
    raw_fused = data.get("fuse")
    if raw_fused is not None:
        if not isinstance(raw_fused, Mapping) or "instances" not in raw_fused:
            raise ScenarioSpecError("fuse section needs an instances list")
        fused = FusedSpec(
            name=str(raw_fused.get("name", "fused")),
            instance_paths=tuple(resolve(q) for q in raw_fused["instances"]),
            cross_adjacency=tuple(
                normalize_pair(str(a), str(b))
                for a, b in raw_fused.get("cross_adjacency", [])
            ),
        )
    return ScenarioSpec(
        instances=tuple(refs),
        base=base,
        p_min_values=p_values,
        objectives=objectives,
        fused=fused,
    )


def fuse_districts(
    instances: Sequence[DistrictInstance],
    cross_adjacency: Iterable[tuple[str, str]],
    name: str = "",
) -> DistrictInstance:
    """Union several districts into one instance with cross-border edges.

    All inputs must share the grade domain and group taxonomy. School ids
    must be globally unique. Dissimilarity over the result uses the combined
    totals.
    """
    if not instances:
        raise InstanceValidationError("nothing to fuse")
    first = instances[0]
    for inst in instances[1:]:
        if inst.grade_domain != first.grade_domain:
            raise InstanceValidationError("fused instances must share a grade domain")
        if inst.taxonomy != first.taxonomy:
            raise InstanceValidationError("fused instances must share a group taxonomy")
    schools = tuple(s for inst in instances for s in inst.schools)
    edges = {pair for inst in instances for pair in inst.adjacency}
    edges.update(normalize_pair(a, b) for a, b in cross_adjacency)
    return DistrictInstance(
        schools=schools,
        adjacency=tuple(sorted(edges)),
        grade_domain=first.grade_domain,
        taxonomy=first.taxonomy,
        name=name or "+".join(i.name or "district" for i in instances),
    )


@dataclass
class CellResult:
    """One sweep cell: a solve plus its impact, or an isolated error."""

    instance_name: str
    district_id: str
    objective: str
    p_min: float
    result: SolveResult | None = None
    impact: ImpactReport | None = None
    gearys_c: float | None = None
    error: str | None = None


def _run_cell(
    instance: DistrictInstance,
    ref: InstanceRef | None,
    objective: str,
    p_min: float,
    base: SolveConfig,
    interdistrict: bool,
) -> CellResult:
    cell = CellResult(
        instance_name=instance.name,
        district_id="+".join(sorted(instance.district_ids)),
        objective=objective,
        p_min=p_min,
    )
    try:
        tax_override = named_objective(instance, objective)
        config = replace(
            base,
            p_min=p_min,
            objective_partition=tax_override,
            interdistrict=interdistrict or base.interdistrict,
        )
        cell.result = solve(instance, config)
        effective_tax = tax_override or instance.taxonomy
        blocks: BlockWeights | None = None
        travel: TravelMatrix | None = None
        if ref is not None and ref.blocks and ref.travel:
            blocks = load_block_weights(ref.blocks)
            travel = load_travel_matrix(ref.travel)
        if cell.result.plan is not None:
            cell.impact = build_impact_report(
                cell.result.plan,
                instance,
                taxonomy=effective_tax,
                block_weights=blocks,
                travel=travel,
            )
        try:
            cell.gearys_c = district_geary(instance, effective_tax)
        except MetricsError:
            cell.gearys_c = None
    except Exception as exc:  # cell isolation: the batch must go on
        log.warning("cell %s/%s/p_min=%s failed: %s", instance.name, objective, p_min, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def run_scenarios(spec: ScenarioSpec, workers: int = 1) -> list[CellResult]:
    """Run every sweep cell; deterministic result order given the spec.

    Cells run concurrently up to ``workers``; failures are captured on the
    cell, never raised. The fused cell grid (when configured) runs with
    interdistrict mode on.
    """
    loaded: dict[str, DistrictInstance] = {}

    def get_instance(path: str) -> DistrictInstance:
        if path not in loaded:
            loaded[path] = load_instance(path)
        return loaded[path]

    jobs: list[tuple[DistrictInstance, InstanceRef | None, str, float, bool]] = []
    errors: list[CellResult] = []
    for ref in spec.instances:
        try:
            instance = get_instance(ref.path)
        except Exception as exc:
            for objective in spec.objectives:
                for p in spec.p_min_values:
                    errors.append(
                        CellResult(
                            instance_name=Path(ref.path).stem,
                            district_id="",
                            objective=objective,
                            p_min=p,
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )
            continue
        for objective in spec.objectives:
            for p in spec.p_min_values:
                jobs.append((instance, ref, objective, p, False))

    if spec.fused is not None:
        try:
            fused_instance = fuse_districts(
                [get_instance(q) for q in spec.fused.instance_paths],
                spec.fused.cross_adjacency,
                name=spec.fused.name,
            )
            for objective in spec.objectives:
                for p in spec.p_min_values:
                    jobs.append((fused_instance, None, objective, p, True))
        except Exception as exc:
            for objective in spec.objectives:
                for p in spec.p_min_values:
                    errors.append(
                        CellResult(
                            instance_name=spec.fused.name,
                            district_id="",
                            objective=objective,
                            p_min=p,
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )

    if workers <= 1:
        results = [_run_cell(i, r, o, p, spec.base, x) for i, r, o, p, x in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_cell, i, r, o, p, spec.base, x) for i, r, o, p, x in jobs
            ]
            results = [f.result() for f in futures]
    return results + errors


# --- Summary table ---

SUMMARY_COLUMNS = [
    "instance", "district_id", "objective", "p_min", "status", "d_before",
    "d_after", "delta_d_relative", "switcher_share", "gearys_c",
    "mean_travel_before", "mean_travel_after", "error",
]


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_rows(results: Sequence[CellResult]) -> list[dict[str, Any]]:
    rows = []
    for cell in results:
        row: dict[str, Any] = {col: None for col in SUMMARY_COLUMNS}
        row["instance"] = cell.instance_name
        row["district_id"] = cell.district_id
        row["objective"] = cell.objective
        row["p_min"] = cell.p_min
        row["error"] = cell.error
        row["gearys_c"] = cell.gearys_c
        if cell.result is not None:
            row["status"] = cell.result.status
            row["d_before"] = cell.result.d_before
            row["d_after"] = cell.result.d_after
            if cell.result.d_after is not None and cell.result.d_before > 0:
                row["delta_d_relative"] = (
                    (cell.result.d_after - cell.result.d_before) / cell.result.d_before
                )
        if cell.impact is not None:
            row["switcher_share"] = cell.impact.switcher_share
            if cell.impact.travel is not None and cell.impact.travel.overall is not None:
                row["mean_travel_before"] = cell.impact.travel.overall.mean_before
                row["mean_travel_after"] = cell.impact.travel.overall.mean_after
        rows.append(row)
    return rows


def write_summary_csv(results: Sequence[CellResult], path: str | Path) -> None:
    """Summary table, byte-stable for identical specs and seeds.

    Wall-clock fields are deliberately absent; every column is a pure
    function of (instance, config, seed).
    """
    rows = summary_rows(results)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in SUMMARY_COLUMNS])


def read_summary_csv(path: str | Path) -> list[dict[str, Any]]:
    """Read a summary CSV back into typed rows."""
    out: list[dict[str, Any]] = []
    with Path(path).open(newline="") as fh:
        for raw in csv.DictReader(fh):
            row: dict[str, Any] = dict(raw)
            for col in (
                "p_min", "d_before", "d_after", "delta_d_relative",
                "switcher_share", "gearys_c", "mean_travel_before", "mean_travel_after",
            ):
                row[col] = float(raw[col]) if raw.get(col) else None
            out.append(row)
    return out


# --- Correlations ---


def correlation_report(records: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
    """Spearman and OLS summaries across districts.

    Args:
        records: one mapping per district with keys ``district``,
            ``delta_d_relative``, ``gearys_c``, and optionally
            ``delta_travel``.

    Returns:
        A dict with per-pairing rho and OLS fit, plus the lower-median
        relative dissimilarity change. Pairings with a constant column are
        flagged rather than computed.

    Raises:
        InsufficientDataError: fewer than 3 usable districts.
    """
    usable = [
        r
        for r in records
        if r.get("delta_d_relative") is not None and r.get("gearys_c") is not None
    ]
    if len(usable) < 3:
        raise InsufficientDataError(
            f"need at least 3 districts with results, have {len(usable)}"
        )

    def pairing(xs: list[float], ys: list[float]) -> dict[str, Any]:
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            return {
                "rho": None,
                "ols_slope": None,
                "ols_intercept": None,
                "flag": "constant input; rank correlation undefined",
            }
        rho = float(scipy_stats.spearmanr(xs, ys).statistic)
        slope, intercept = (float(v) for v in np.polyfit(xs, ys, 1))
        return {"rho": rho, "ols_slope": slope, "ols_intercept": intercept, "flag": None}

    c_values = [float(r["gearys_c"]) for r in usable]
    dd_values = [float(r["delta_d_relative"]) for r in usable]
    report: dict[str, Any] = {
        "n": len(usable),
        "districts": [str(r.get("district", r.get("instance", ""))) for r in usable],
        "c_vs_delta_d": pairing(c_values, dd_values),
        "median_delta_d_relative": lower_median(dd_values),
    }

    with_travel = [r for r in usable if r.get("delta_travel") is not None]
    if len(with_travel) >= 3:
        report["travel_vs_delta_d"] = pairing(
            [float(r["delta_travel"]) for r in with_travel],
            [float(r["delta_d_relative"]) for r in with_travel],
        )
    else:
        report["travel_vs_delta_d"] = None
    return report


# --- Mergers vs. redistricting ---


@dataclass
class CrossPolicyRecord:
    district_id: str
    merger_delta_d_relative: float | None
    merger_delta_travel: float | None
    merger_tradeoff: float | None
    redistricting_delta_d_relative: float | None
    redistricting_percent_switching: float | None
    redistricting_tradeoff: float | None
    flags: list[str] = field(default_factory=list)


def load_redistricting_csv(path: str | Path) -> list[dict[str, Any]]:
    """Read externally produced redistricting results.

    Expected header: district_id, delta_d_relative, percent_switching.
    """
    p = Path(path)
    rows = []
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"district_id", "delta_d_relative", "percent_switching"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ScenarioSpecError(
                f"{p}: header must include district_id, delta_d_relative, percent_switching"
            )
        for raw in reader:
            try:
                rows.append(
                    {
                        "district_id": raw["district_id"],
                        "delta_d_relative": float(raw["delta_d_relative"]),
                        "percent_switching": float(raw["percent_switching"]),
                    }
                )
            except ValueError as exc:
                raise ScenarioSpecError(f"{p}: bad numeric value: {exc}") from exc
    return rows


def crossover_table(
    merger_rows: Sequence[Mapping[str, Any]],
    redistricting_rows: Sequence[Mapping[str, Any]],
) -> tuple[list[CrossPolicyRecord], list[str]]:
    """Join merger outcomes with redistricting outcomes per district.

    Returns (records, diagnostics). Unmatched districts on either side are
    reported in diagnostics; an empty join yields an empty table plus a
    warning, not an error. Trade-off ratios divide the relative change in
    dissimilarity by the cost axis and are omitted where the denominator is
    zero or missing.
    """
    merger_by_district: dict[str, Mapping[str, Any]] = {}
    for row in merger_rows:
        did = str(row.get("district_id") or "")
        if did and did not in merger_by_district:
            merger_by_district[did] = row
    redist_by_district = {str(r["district_id"]): r for r in redistricting_rows}

    diagnostics: list[str] = []
    records: list[CrossPolicyRecord] = []
    for did in sorted(merger_by_district.keys() & redist_by_district.keys()):
        m = merger_by_district[did]
        r = redist_by_district[did]
        flags: list[str] = []
        dd = m.get("delta_d_relative")
        before = m.get("mean_travel_before")
        after = m.get("mean_travel_after")
        dt = (after - before) if (before is not None and after is not None) else None
        if dt is None:
            flags.append("no travel data for mergers")
            tradeoff = None
        elif dt == 0:
            flags.append("zero travel change; trade-off omitted")
            tradeoff = None
        else:
            tradeoff = dd / dt if dd is not None else None
        p_sw = r["percent_switching"]
        if p_sw == 0:
            flags.append("zero redistricting switching; trade-off omitted")
            r_tradeoff = None
        else:
            r_tradeoff = r["delta_d_relative"] / p_sw
        records.append(
            CrossPolicyRecord(
                district_id=did,
                merger_delta_d_relative=dd,
                merger_delta_travel=dt,
                merger_tradeoff=tradeoff,
                redistricting_delta_d_relative=r["delta_d_relative"],
                redistricting_percent_switching=p_sw,
                redistricting_tradeoff=r_tradeoff,
                flags=flags,
            )
        )

    unmatched_m = sorted(merger_by_district.keys() - redist_by_district.keys())
    unmatched_r = sorted(redist_by_district.keys() - merger_by_district.keys())
    if unmatched_m:
        diagnostics.append(f"merger districts without redistricting results: {unmatched_m}")
    if unmatched_r:
        diagnostics.append(f"redistricting districts without merger results: {unmatched_r}")
    if not records:
        diagnostics.append("warning: join produced no overlapping districts")
    return records, diagnostics


CROSSOVER_COLUMNS = [
    "district_id", "merger_delta_d_relative", "merger_delta_travel",
    "merger_tradeoff", "redistricting_delta_d_relative",
    "redistricting_percent_switching", "redistricting_tradeoff", "flags",
]


def write_crossover_csv(records: Sequence[CrossPolicyRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CROSSOVER_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.district_id,
                    _fmt(rec.merger_delta_d_relative),
                    _fmt(rec.merger_delta_travel),
                    _fmt(rec.merger_tradeoff),
                    _fmt(rec.redistricting_delta_d_relative),
                    _fmt(rec.redistricting_percent_switching),
                    _fmt(rec.redistricting_tradeoff),
                    ";".join(rec.flags),
                ]
            )
