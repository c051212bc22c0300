"""Family- and district-level impacts of a merger plan.

Switcher counts come straight from the plan's span assignments: a student
enrolled at a cluster member in a grade outside that member's span attends
the member serving the grade. Travel impacts apportion each school's
switchers over census blocks in proportion to block-level group counts
(fractional students are accepted) and price each fraction with a
block-to-school minutes matrix. Opt-out adjustment thins merged schools'
post-merger counts by per-group ratios before re-measuring segregation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .district import DistrictInstance, GroupTaxonomy, school_totals
from .metrics import SchoolDemographics, dissimilarity
from .solver import MergerPlan

FlowKey = tuple[str, str, str, str]  # (from_school, to_school, grade, group)


class ImpactDataError(ValueError):
    """A block-weights or travel file could not be parsed."""


class ApportionError(ValueError):
    """No usable block weights for a (school, group) needing apportionment."""


class MissingTravelError(ValueError):
    """The travel matrix lacks (block, school) pairs a plan needs."""

    def __init__(self, pairs: list[tuple[str, str]]):
        self.pairs = sorted(pairs)
        shown = ", ".join(f"({b},{s})" for b, s in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" and {len(self.pairs) - 10} more"
        super().__init__(f"travel matrix missing {len(self.pairs)} pairs: {shown}{more}")


@dataclass(frozen=True)
class BlockWeights:
    """Per-block group counts attributed to each school's attendance area."""

    groups: tuple[str, ...]
    # (school_id, group) -> block_id -> count
    by_school_group: Mapping[tuple[str, str], Mapping[str, float]]

    def blocks_for(self, school_id: str, group: str) -> Mapping[str, float]:
        return self.by_school_group.get((school_id, group), {})


@dataclass(frozen=True)
class TravelMatrix:
    """Minutes from block centroid to school."""

    minutes: Mapping[tuple[str, str], float]

    def get(self, block_id: str, school_id: str) -> float | None:
        return self.minutes.get((block_id, school_id))


def load_block_weights(path: str | Path) -> BlockWeights:
    """Read a block-weights CSV: block_id, school_id, then one column per group."""
    p = Path(path)
    with p.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ImpactDataError(f"{p}: empty block-weights file") from None
        if header[:2] != ["block_id", "school_id"] or len(header) < 3:
            raise ImpactDataError(
                f"{p}: header must start with block_id, school_id and list groups"
            )
        groups = tuple(header[2:])
        table: dict[tuple[str, str], dict[str, float]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ImpactDataError(f"{p}:{lineno}: expected {len(header)} columns")
            block, school = row[0], row[1]
            for group, cell in zip(groups, row[2:]):
                try:
                    value = float(cell)
                except ValueError:
                    raise ImpactDataError(f"{p}:{lineno}: non-numeric count {cell!r}") from None
                if value < 0:
                    raise ImpactDataError(f"{p}:{lineno}: negative count {value}")
                if value:
                    table.setdefault((school, group), {})[block] = (
                        table.get((school, group), {}).get(block, 0.0) + value
                    )
    return BlockWeights(groups=groups, by_school_group=table)


def load_travel_matrix(path: str | Path) -> TravelMatrix:
    """Read a travel CSV: block_id, school_id, minutes."""
    p = Path(path)
    minutes: dict[tuple[str, str], float] = {}
    with p.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ImpactDataError(f"{p}: empty travel file") from None
        if header != ["block_id", "school_id", "minutes"]:
            raise ImpactDataError(f"{p}: header must be block_id, school_id, minutes")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ImpactDataError(f"{p}:{lineno}: expected 3 columns")
            try:
                value = float(row[2])
            except ValueError:
                raise ImpactDataError(f"{p}:{lineno}: non-numeric minutes {row[2]!r}") from None
            if value < 0:
                raise ImpactDataError(f"{p}:{lineno}: negative minutes {value}")
            minutes[(row[0], row[1])] = value
    return TravelMatrix(minutes=minutes)


# --- Reassignment ---


def switchers(plan: MergerPlan, instance: DistrictInstance) -> dict[FlowKey, float]:
    """Who moves where: (from, to, grade, group) -> student count.

    Within each cluster and grade, students enrolled at members not serving
    that grade are reassigned to the unique member that does. Counts come
    from status-quo enrollment; zero-count cells are omitted.
    """
    flows: dict[FlowKey, float] = {}
    for cluster in plan.multi_clusters():
        for gi, grade in enumerate(instance.grade_domain):
            owner = cluster.serving(gi)
            for m in cluster.members:
                if m == owner:
                    continue
                for group, count in instance.school(m).enrollment[grade].items():
                    if count:
                        flows[(m, owner, grade, group)] = (
                            flows.get((m, owner, grade, group), 0.0) + count
                        )
    return flows


def post_merger_matrices(
    plan: MergerPlan, instance: DistrictInstance
) -> dict[str, dict[str, dict[str, float]]]:
    """Post-merger enrollment per school, rebuilt from the switcher flows.

    This is an independent reconstruction (status quo minus outflows plus
    inflows); it must agree with the solver's per-cluster summation, and the
    regression suite holds it to that.
    """
    groups = instance.taxonomy.groups
    matrices = {
        s.id: {
            grade: {g: float(s.enrollment[grade].get(g, 0)) for g in groups}
            for grade in instance.grade_domain
        }
        for s in instance.schools
    }
    for (src, dst, grade, group), count in switchers(plan, instance).items():
        matrices[src][grade][group] -= count
        matrices[dst][grade][group] += count
    return matrices


def _matrix_totals(
    matrix: Mapping[str, Mapping[str, float]], taxonomy: GroupTaxonomy
) -> tuple[float, float, float]:
    """(all-group total, counted t, focal w) of one enrollment matrix."""
    focal = set(taxonomy.focal)
    counted = taxonomy.counted
    total = math.fsum(c for row in matrix.values() for c in row.values())
    t = math.fsum(c for row in matrix.values() for g, c in row.items() if g in counted)
    w = math.fsum(c for row in matrix.values() for g, c in row.items() if g in focal)
    return total, t, w


# --- Travel ---


def apportion_to_blocks(
    school_id: str,
    group: str,
    count: float,
    block_weights: BlockWeights,
    *,
    group_total: float | None = None,
) -> dict[str, float]:
    """Spread a switcher count over a school's blocks by group weight.

    Block b receives ``count * weight_b / W``. By default W is the sum of
    the block weights themselves, which conserves the count exactly across
    blocks. ``group_total`` substitutes an externally known group population
    for W, for data where block estimates do not sum to the enrolled total;
    conservation then holds only up to that discrepancy.

    Raises:
        ApportionError: no positive weights exist for (school, group).
    """
    blocks = block_weights.blocks_for(school_id, group)
    weight_sum = math.fsum(blocks.values())
    if weight_sum <= 0:
        raise ApportionError(f"no block weights for school {school_id}, group {group}")
    denom = group_total if group_total is not None else weight_sum
    if denom <= 0:
        raise ApportionError(f"non-positive group total {denom} for {school_id}/{group}")
    return {block: count * w / denom for block, w in sorted(blocks.items())}


@dataclass(frozen=True)
class GroupTravel:
    count: float
    mean_before: float
    mean_after: float


@dataclass(frozen=True)
class BlockFlow:
    from_school: str
    to_school: str
    group: str
    block_id: str
    count: float
    minutes_before: float
    minutes_after: float


@dataclass
class TravelReport:
    per_group: dict[str, GroupTravel]
    overall: GroupTravel | None
    block_flows: list[BlockFlow]
    diagnostics: list[str] = field(default_factory=list)


def travel_deltas(
    plan: MergerPlan,
    instance: DistrictInstance,
    block_weights: BlockWeights,
    travel: TravelMatrix,
) -> TravelReport:
    """Travel-time change for switching students, via block apportionment.

    Means are weighted by fractional switcher counts; the overall row pools
    every switcher rather than averaging group means. Flows whose (school,
    group) has no block weights are skipped and reported in diagnostics.

    Raises:
        MissingTravelError: any needed (block, school) minutes are absent.
    """
    flows = switchers(plan, instance)
    by_route: dict[tuple[str, str, str], float] = {}
    for (src, dst, _grade, group), count in flows.items():
        by_route[(src, dst, group)] = by_route.get((src, dst, group), 0.0) + count

    diagnostics: list[str] = []
    if not flows:
        diagnostics.append("no switchers under this plan")
        return TravelReport(per_group={}, overall=None, block_flows=[], diagnostics=diagnostics)

    missing: set[tuple[str, str]] = set()
    block_flows: list[BlockFlow] = []
    group_acc: dict[str, list[float]] = {}

    for (src, dst, group), count in sorted(by_route.items()):
        try:
            spread = apportion_to_blocks(src, group, count, block_weights)
        except ApportionError:
            diagnostics.append(
                f"no block weights for school {src}, group {group}; "
                f"{count:g} switchers skipped in travel stats"
            )
            continue
        for block, frac in spread.items():
            before = travel.get(block, src)
            after = travel.get(block, dst)
            if before is None:
                missing.add((block, src))
            if after is None:
                missing.add((block, dst))
            if before is None or after is None:
                continue
            block_flows.append(BlockFlow(src, dst, group, block, frac, before, after))
            acc = group_acc.setdefault(group, [0.0, 0.0, 0.0])
            acc[0] += frac
            acc[1] += frac * before
            acc[2] += frac * after

    if missing:
        raise MissingTravelError(sorted(missing))

    per_group = {
        group: GroupTravel(acc[0], acc[1] / acc[0], acc[2] / acc[0])
        for group, acc in sorted(group_acc.items())
        if acc[0] > 0
    }
    total = math.fsum(acc[0] for acc in group_acc.values())
    overall = None
    if total > 0:
        overall = GroupTravel(
            total,
            math.fsum(acc[1] for acc in group_acc.values()) / total,
            math.fsum(acc[2] for acc in group_acc.values()) / total,
        )
    return TravelReport(
        per_group=per_group, overall=overall, block_flows=block_flows, diagnostics=diagnostics
    )


# --- Opt-out ---


@dataclass
class OptOutResult:
    ratios: dict[str, float]
    demographics: list[SchoolDemographics]
    d_adjusted: float


def apply_opt_out(
    plan: MergerPlan,
    instance: DistrictInstance,
    ratios: Mapping[str, float],
    taxonomy: GroupTaxonomy | None = None,
) -> OptOutResult:
    """Thin merged schools by per-group opt-out ratios and re-measure D.

    Every school in a cluster of two or more has each group's post-merger
    count scaled by (1 - ratio); opted-out students leave the district
    totals as well (they exit the system D is measured over). Ratios above
    one are clamped to one; negative ratios are rejected.

    Raises:
        DegenerateTotalsError: opt-out empties one side of the group split.
    """
    tax = taxonomy or instance.taxonomy
    clamped: dict[str, float] = {}
    for group, r in ratios.items():
        if group not in set(tax.groups):
            raise ValueError(f"opt-out ratio for unknown group: {group}")
        if not math.isfinite(r) or r < 0:
            raise ValueError(f"opt-out ratio for {group} must be finite and >= 0, got {r}")
        clamped[group] = min(r, 1.0)

    merged = {m for c in plan.multi_clusters() for m in c.members}
    matrices = post_merger_matrices(plan, instance)
    demos: list[SchoolDemographics] = []
    for sid in instance.school_ids:
        matrix = matrices[sid]
        if sid in merged:
            matrix = {
                grade: {
                    group: count * (1.0 - clamped.get(group, 0.0))
                    for group, count in row.items()
                }
                for grade, row in matrix.items()
            }
        _, t_s, w_s = _matrix_totals(matrix, tax)
        demos.append(SchoolDemographics(sid, t_s, w_s))

    t_total = math.fsum(d.t_s for d in demos)
    w_total = math.fsum(d.w_s for d in demos)
    d_adjusted = dissimilarity(demos, t_total, w_total)
    return OptOutResult(ratios=clamped, demographics=demos, d_adjusted=d_adjusted)


# --- Closures ---


@dataclass(frozen=True)
class ClosureRecord:
    school_id: str
    pre_total: float
    post_total: float
    ratio: float
    closed: bool
    severely_reduced: bool


def closure_report(plan: MergerPlan, instance: DistrictInstance) -> list[ClosureRecord]:
    """Post/pre enrollment ratios per school, flagging closures.

    A school serving zero students post-merger is a closure (reachable only
    at p_min = 0); one at or below half its original size is severely
    reduced. Schools that started empty report a ratio of 1.
    """
    matrices = post_merger_matrices(plan, instance)
    records = []
    for s in instance.schools:
        pre = s.total_students
        post = math.fsum(c for row in matrices[s.id].values() for c in row.values())
        ratio = post / pre if pre > 0 else 1.0
        records.append(
            ClosureRecord(
                school_id=s.id,
                pre_total=pre,
                post_total=post,
                ratio=ratio,
                closed=pre > 0 and post == 0,
                severely_reduced=pre > 0 and ratio <= 0.5,
            )
        )
    return records


# --- Assembled report ---


@dataclass
class SchoolImpact:
    school_id: str
    t_before: float
    w_before: float
    t_after: float
    w_after: float
    total_before: float
    total_after: float
    ratio: float
    closed: bool
    severely_reduced: bool


@dataclass
class ImpactReport:
    d_before: float
    d_after: float
    switch_total: float
    switcher_share: float
    per_group_switchers: dict[str, float]
    flows: dict[FlowKey, float]
    per_school: list[SchoolImpact]
    travel: TravelReport | None = None
    opt_out: OptOutResult | None = None
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "d_before": self.d_before,
            "d_after": self.d_after,
            "switch_total": self.switch_total,
            "switcher_share": self.switcher_share,
            "per_group_switchers": dict(sorted(self.per_group_switchers.items())),
            "flows": [
                {
                    "from": src, "to": dst, "grade": grade, "group": group, "count": count,
                }
                for (src, dst, grade, group), count in sorted(self.flows.items())
            ],
            "per_school": [vars(s).copy() for s in self.per_school],
            "diagnostics": list(self.diagnostics),
        }
        if self.travel is not None:
            data["travel"] = {
                "per_group": {
                    g: vars(t).copy() for g, t in sorted(self.travel.per_group.items())
                },
                "overall": vars(self.travel.overall).copy() if self.travel.overall else None,
                "block_flows": [vars(b).copy() for b in self.travel.block_flows],
                "diagnostics": list(self.travel.diagnostics),
            }
        if self.opt_out is not None:
            data["opt_out"] = {
                "ratios": dict(sorted(self.opt_out.ratios.items())),
                "d_adjusted": self.opt_out.d_adjusted,
            }
        return data


def build_impact_report(
    plan: MergerPlan,
    instance: DistrictInstance,
    *,
    taxonomy: GroupTaxonomy | None = None,
    block_weights: BlockWeights | None = None,
    travel: TravelMatrix | None = None,
    opt_out_ratios: Mapping[str, float] | None = None,
) -> ImpactReport:
    """Assemble the full impact picture for one plan."""
    tax = taxonomy or instance.taxonomy
    flows = switchers(plan, instance)
    matrices = post_merger_matrices(plan, instance)

    demos_before = []
    demos_after = []
    per_school = []
    closures = {r.school_id: r for r in closure_report(plan, instance)}
    for s in instance.schools:
        t_b, w_b = school_totals(s, tax)
        _, t_a, w_a = _matrix_totals(matrices[s.id], tax)
        demos_before.append(SchoolDemographics(s.id, t_b, w_b))
        demos_after.append(SchoolDemographics(s.id, t_a, w_a))
        rec = closures[s.id]
        per_school.append(
            SchoolImpact(
                school_id=s.id,
                t_before=t_b,
                w_before=w_b,
                t_after=t_a,
                w_after=w_a,
                total_before=rec.pre_total,
                total_after=rec.post_total,
                ratio=rec.ratio,
                closed=rec.closed,
                severely_reduced=rec.severely_reduced,
            )
        )

    t_total = math.fsum(d.t_s for d in demos_before)
    w_total = math.fsum(d.w_s for d in demos_before)
    d_before = dissimilarity(demos_before, t_total, w_total)
    d_after = dissimilarity(demos_after, t_total, w_total)

    per_group: dict[str, float] = {}
    for (_src, _dst, _grade, group), count in flows.items():
        per_group[group] = per_group.get(group, 0.0) + count
    switch_total = math.fsum(per_group.values())
    all_students = math.fsum(s.total_students for s in instance.schools)
    share = switch_total / all_students if all_students > 0 else 0.0

    diagnostics: list[str] = []
    if not flows:
        diagnostics.append("no switchers under this plan")

    travel_report = None
    if block_weights is not None and travel is not None:
        travel_report = travel_deltas(plan, instance, block_weights, travel)
        diagnostics.extend(travel_report.diagnostics)

    opt_out = None
    if opt_out_ratios is not None:
        opt_out = apply_opt_out(plan, instance, opt_out_ratios, tax)

    return ImpactReport(
        d_before=d_before,
        d_after=d_after,
        switch_total=switch_total,
        switcher_share=share,
        per_group_switchers=per_group,
        flows=flows,
        per_school=per_school,
        travel=travel_report,
        opt_out=opt_out,
        diagnostics=diagnostics,
    )


_CSV_HEADER = [
    "kind", "school_id", "group", "grade", "from_school", "to_school",
    "block_id", "count", "before", "after", "note",
]


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_impact_csv(report: ImpactReport, path: str | Path) -> None:
    """Write the report as a flat CSV, one `kind` of row per concern."""
    rows: list[list[Any]] = []
    rows.append(["dissimilarity", "", "", "", "", "", "", "", report.d_before, report.d_after, ""])
    rows.append(["switchers", "", "", "", "", "", "", report.switch_total,
                 report.switcher_share, "", ""])
    for group, count in sorted(report.per_group_switchers.items()):
        rows.append(["group_switchers", "", group, "", "", "", "", count, "", "", ""])
    for s in report.per_school:
        note = "closed" if s.closed else ("severely_reduced" if s.severely_reduced else "")
        rows.append(["school", s.school_id, "", "", "", "", "", "",
                     s.total_before, s.total_after, note])
    for (src, dst, grade, group), count in sorted(report.flows.items()):
        rows.append(["flow", "", group, grade, src, dst, "", count, "", "", ""])
    if report.travel is not None:
        for b in report.travel.block_flows:
            rows.append(["block_flow", "", b.group, "", b.from_school, b.to_school,
                         b.block_id, b.count, b.minutes_before, b.minutes_after, ""])
        for group, t in sorted(report.travel.per_group.items()):
            rows.append(["group_travel", "", group, "", "", "", "", t.count,
                         t.mean_before, t.mean_after, ""])
        if report.travel.overall is not None:
            o = report.travel.overall
            rows.append(["travel", "", "", "", "", "", "", o.count, o.mean_before,
                         o.mean_after, ""])
    if report.opt_out is not None:
        rows.append(["opt_out", "", "", "", "", "", "", "", report.opt_out.d_adjusted, "", ""])

    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_HEADER)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
