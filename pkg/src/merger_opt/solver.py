"""Search for merger plans that minimize post-merger dissimilarity.

A plan partitions the district's schools into clusters of one to three
pairwise-adjacent schools and hands each cluster member a contiguous slice
of the grade domain; students of an out-of-span grade attend the cluster
member serving that grade. District totals are unchanged by any merger, so
the dissimilarity index decomposes into a sum of independent per-cluster
contributions. The exact solver exploits that: depth-first branch and bound
over per-school cluster choices with an admissible fixed-contribution bound.
Instances above EXACT_SCHOOL_LIMIT schools fall back to steepest-descent
local search with seeded restarts, which returns a feasible (not provably
optimal) plan.
"""

from __future__ import annotations

import itertools
import logging
import math
import random
import threading
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

from .district import DistrictInstance, GroupTaxonomy, normalize_pair
from .metrics import (
    DegenerateTotalsError,
    SchoolDemographics,
    dissimilarity,
)

log = logging.getLogger(__name__)

# Instances up to this many schools are solved exactly.
EXACT_SCHOOL_LIMIT = 24
DEFAULT_TIME_LIMIT = 1800.0
LOCAL_SEARCH_RESTARTS = 8

# Two plans whose dissimilarity differs by at most this are treated as tied.
_TIE_TOL = 1e-12
# Absolute slack on capacity comparisons, absorbing float dust in products
# like 0.8 * 300 without ever flipping a decision on integer-valued data.
_CAP_TOL = 1e-9
# Nodes between time-limit / cancellation checks.
_CHECK_EVERY = 256


class ConfigConflictError(ValueError):
    """The solve configuration contradicts itself or the instance."""


class _SearchStop(Exception):
    """Internal signal: time limit hit or cancellation requested."""


@dataclass(frozen=True, order=True)
class GradeSpan:
    """A contiguous run of grade indices, inclusive on both ends."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid grade span [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def contains(self, grade_index: int) -> bool:
        return self.start <= grade_index <= self.end

    def indices(self) -> range:
        return range(self.start, self.end + 1)

    def label(self, grade_domain: Sequence[str]) -> str:
        if self.start == self.end:
            return grade_domain[self.start]
        return f"{grade_domain[self.start]}-{grade_domain[self.end]}"


@dataclass(frozen=True)
class Cluster:
    """A set of 1 to 3 schools plus each member's post-merger grade span.

    ``spans`` is aligned with ``members`` (both sorted by school id). A span
    of None means the school serves no grades after the merger, which the
    capacity rules permit only when p_min is zero.
    """

    members: tuple[str, ...]
    spans: tuple[GradeSpan | None, ...]

    def __post_init__(self) -> None:
        if not (1 <= len(self.members) <= 3):
            raise ValueError(f"cluster size {len(self.members)} outside 1..3")
        if len(self.spans) != len(self.members):
            raise ValueError("spans not aligned with members")
        if tuple(sorted(self.members)) != self.members:
            raise ValueError("cluster members must be sorted")

    @classmethod
    def build(cls, spans_by_id: Mapping[str, GradeSpan | None]) -> "Cluster":
        members = tuple(sorted(spans_by_id))
        return cls(members, tuple(spans_by_id[m] for m in members))

    @classmethod
    def singleton(cls, school_id: str, n_grades: int) -> "Cluster":
        return cls((school_id,), (GradeSpan(0, n_grades - 1),))

    @cached_property
    def span_map(self) -> dict[str, GradeSpan | None]:
        return dict(zip(self.members, self.spans))

    def span_of(self, school_id: str) -> GradeSpan | None:
        return self.span_map[school_id]

    @property
    def size(self) -> int:
        return len(self.members)

    def serving(self, grade_index: int) -> str:
        """The member school whose span contains the given grade."""
        for m, sp in zip(self.members, self.spans):
            if sp is not None and sp.contains(grade_index):
                return m
        raise ValueError(f"no member serves grade index {grade_index}")


@dataclass(frozen=True)
class MergerPlan:
    """A partition of the instance's schools into clusters."""

    clusters: tuple[Cluster, ...]

    @classmethod
    def build(cls, clusters: Iterable[Cluster]) -> "MergerPlan":
        return cls(tuple(sorted(clusters, key=lambda c: c.members)))

    @classmethod
    def identity(cls, instance: DistrictInstance) -> "MergerPlan":
        n = len(instance.grade_domain)
        return cls.build(Cluster.singleton(sid, n) for sid in instance.school_ids)

    @cached_property
    def cluster_of(self) -> dict[str, Cluster]:
        return {m: c for c in self.clusters for m in c.members}

    @property
    def school_ids(self) -> tuple[str, ...]:
        return tuple(m for c in self.clusters for m in c.members)

    def multi_clusters(self) -> tuple[Cluster, ...]:
        return tuple(c for c in self.clusters if c.size > 1)

    def is_identity(self) -> bool:
        return all(c.size == 1 for c in self.clusters)


@dataclass(frozen=True)
class SolveConfig:
    """Knobs for one solve.

    required_pairs pin two schools into the same cluster (possibly a
    triple); forbidden_pairs keep two schools apart. Pairs are unordered.
    objective_partition swaps in an alternative focal split; None keeps the
    instance's own. interdistrict permits clusters spanning district lines.
    """

    p_min: float = 0.8
    allow_triples: bool = True
    time_limit: float = DEFAULT_TIME_LIMIT
    seed: int = 0
    required_pairs: frozenset[tuple[str, str]] = frozenset()
    forbidden_pairs: frozenset[tuple[str, str]] = frozenset()
    objective_partition: GroupTaxonomy | None = None
    interdistrict: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_min <= 1.0):
            raise ConfigConflictError(f"p_min {self.p_min} outside [0, 1]")
        if self.time_limit <= 0:
            raise ConfigConflictError("time_limit must be positive")
        req = frozenset(normalize_pair(*p) for p in self.required_pairs)
        forb = frozenset(normalize_pair(*p) for p in self.forbidden_pairs)
        object.__setattr__(self, "required_pairs", req)
        object.__setattr__(self, "forbidden_pairs", forb)
        overlap = req & forb
        if overlap:
            raise ConfigConflictError(f"pairs both required and forbidden: {sorted(overlap)}")


@dataclass
class SearchStats:
    nodes: int = 0
    restarts: int = 0
    wall_time: float = 0.0
    method: str = "exact"


@dataclass
class SolveResult:
    """Outcome of one solve.

    status is "optimal" only when the exact search exhausted the space,
    "feasible" for incumbents cut short by the time limit, cancellation, or
    the local-search path, and "infeasible" when required pairs cannot be
    realized (plan and d_after are None in that case).
    """

    plan: MergerPlan | None
    d_before: float
    d_after: float | None
    status: str
    stats: SearchStats
    config: SolveConfig


@dataclass(frozen=True)
class ClusterCandidate:
    """A feasible cluster with its best span assignment already resolved."""

    members: tuple[str, ...]
    spans: tuple[GradeSpan | None, ...]
    contribution: float
    member_terms: tuple[float, ...]
    switchers: float

    def cluster(self) -> Cluster:
        return Cluster(self.members, self.spans)

    @property
    def size(self) -> int:
        return len(self.members)


# --- Precomputed per-solve context ---


class _SolveContext:
    """Prefix-summed enrollment views used by span enumeration.

    For each school three cumulative arrays are kept over the grade axis:
    all-group totals (capacity checks count every student), counted totals,
    and focal totals (the objective's split). A span's sum is then two array
    lookups.
    """

    def __init__(self, instance: DistrictInstance, taxonomy: GroupTaxonomy, p_min: float):
        self.instance = instance
        self.taxonomy = taxonomy
        self.p_min = p_min
        self.n_grades = len(instance.grade_domain)

        focal = set(taxonomy.focal)
        counted = taxonomy.counted
        self.cum_all: dict[str, list[float]] = {}
        self.cum_t: dict[str, list[float]] = {}
        self.cum_w: dict[str, list[float]] = {}
        self.current_all: dict[str, float] = {}
        self.capacity: dict[str, float] = {}
        for s in instance.schools:
            alls, ts, ws = [0.0], [0.0], [0.0]
            for grade in instance.grade_domain:
                row = s.enrollment[grade]
                alls.append(alls[-1] + math.fsum(row.values()))
                ts.append(ts[-1] + math.fsum(c for g, c in row.items() if g in counted))
                ws.append(ws[-1] + math.fsum(c for g, c in row.items() if g in focal))
            self.cum_all[s.id] = alls
            self.cum_t[s.id] = ts
            self.cum_w[s.id] = ws
            self.current_all[s.id] = alls[-1]
            self.capacity[s.id] = s.capacity

        totals = [
            (self.cum_t[s.id][-1], self.cum_w[s.id][-1]) for s in instance.schools
        ]
        self.t_total = math.fsum(t for t, _ in totals)
        self.w_total = math.fsum(w for _, w in totals)
        if self.t_total <= 0 or self.w_total <= 0 or self.w_total >= self.t_total:
            raise DegenerateTotalsError(
                f"degenerate group totals under the objective split: focal "
                f"{self.w_total} of {self.t_total}"
            )
        self.c_total = self.t_total - self.w_total

    def term(self, w_post: float, t_post: float) -> float:
        return abs(w_post / self.w_total - (t_post - w_post) / self.c_total)

    def school_term(self, school_id: str) -> float:
        return self.term(self.cum_w[school_id][-1], self.cum_t[school_id][-1])


def _cluster_cums(ctx: _SolveContext, members: Sequence[str]) -> tuple[list[float], list[float], list[float]]:
    n = ctx.n_grades + 1
    ca = [0.0] * n
    ct = [0.0] * n
    cw = [0.0] * n
    for m in members:
        a, t, w = ctx.cum_all[m], ctx.cum_t[m], ctx.cum_w[m]
        for i in range(n):
            ca[i] += a[i]
            ct[i] += t[i]
            cw[i] += w[i]
    return ca, ct, cw


def _iter_span_assignments(
    n_grades: int, members: tuple[str, ...], allow_empty: bool
) -> Iterable[dict[str, GradeSpan | None]]:
    """All distinct assignments of contiguous grade segments to members.

    Segments are taken left to right over the grade domain and handed to a
    permutation of the members. Empty segments (a member serving nothing)
    are generated only when allow_empty is set. Duplicate assignments that
    arise from permuting empty segments are suppressed.
    """
    k = len(members)
    if allow_empty:
        cuts_iter = itertools.combinations_with_replacement(range(n_grades + 1), k - 1)
    else:
        cuts_iter = itertools.combinations(range(1, n_grades), k - 1)
    cut_sets = list(cuts_iter)
    seen: set[tuple] = set()
    for perm in itertools.permutations(members):
        for cuts in cut_sets:
            bounds = (0,) + cuts + (n_grades,)
            spans: dict[str, GradeSpan | None] = {}
            for i, m in enumerate(perm):
                lo, hi = bounds[i], bounds[i + 1]
                spans[m] = GradeSpan(lo, hi - 1) if hi > lo else None
            sig = tuple(spans[m] for m in members)
            if sig in seen:
                continue
            seen.add(sig)
            yield spans


def _span_sum(cum: Sequence[float], span: GradeSpan | None) -> float:
    if span is None:
        return 0.0
    return cum[span.end + 1] - cum[span.start]


def _evaluate_assignment(
    ctx: _SolveContext,
    members: tuple[str, ...],
    spans: Mapping[str, GradeSpan | None],
    cums: tuple[list[float], list[float], list[float]],
) -> tuple[float, tuple[float, ...], float] | None:
    """Capacity-check one span assignment; return (contribution, terms, switchers).

    Returns None when any capacity rule fails. Rules, with post(s) the
    all-group post-merger total of member s and cur(s) its current total:

      * for every member s:      p_min * cur(s) <= post(s) <= Capacity(s)
      * for members s, s2 with span(s2) ending above span(s):
                                 p_min * cur(s2) <= post(s) <= Capacity(s2)

    The second rule bounds the feeding school's cohort by the band of the
    school it feeds into. Comparisons carry a 1e-9 absolute slack.
    """
    ca, ct, cw = cums
    p_min = ctx.p_min
    post_all: dict[str, float] = {}
    for m in members:
        post = _span_sum(ca, spans[m])
        if post + _CAP_TOL < p_min * ctx.current_all[m]:
            return None
        if post > ctx.capacity[m] + _CAP_TOL:
            return None
        post_all[m] = post
    for m in members:
        sp = spans[m]
        if sp is None:
            continue
        for m2 in members:
            if m2 == m:
                continue
            sp2 = spans[m2]
            if sp2 is None or sp2.end <= sp.end:
                continue
            if post_all[m] + _CAP_TOL < p_min * ctx.current_all[m2]:
                return None
            if post_all[m] > ctx.capacity[m2] + _CAP_TOL:
                return None

    terms = []
    for m in members:
        w_post = _span_sum(cw, spans[m])
        t_post = _span_sum(ct, spans[m])
        terms.append(ctx.term(w_post, t_post))
    contribution = math.fsum(terms)
    switchers = math.fsum(
        ctx.current_all[m] - _span_sum(ctx.cum_all[m], spans[m]) for m in members
    )
    return contribution, tuple(terms), switchers


def _assignment_sort_key(
    members: tuple[str, ...], spans: Mapping[str, GradeSpan | None]
) -> tuple:
    # Deterministic preference among tied splits: the member with the
    # smallest id takes the lowest span; empty spans sort last.
    return tuple(
        (1, -1, -1) if spans[m] is None else (0, spans[m].start, spans[m].end)
        for m in members
    )


def _best_assignment(ctx: _SolveContext, members: tuple[str, ...]) -> ClusterCandidate | None:
    cums = _cluster_cums(ctx, members)
    allow_empty = ctx.p_min == 0.0
    best = None
    best_key = None
    for spans in _iter_span_assignments(ctx.n_grades, members, allow_empty):
        evaluated = _evaluate_assignment(ctx, members, spans, cums)
        if evaluated is None:
            continue
        contribution, terms, switchers = evaluated
        key = (contribution, switchers, _assignment_sort_key(members, spans))
        if best_key is None or key < best_key:
            best_key = key
            best = ClusterCandidate(
                members=members,
                spans=tuple(spans[m] for m in members),
                contribution=contribution,
                member_terms=terms,
                switchers=switchers,
            )
    return best


def _singleton_candidate(ctx: _SolveContext, school_id: str) -> ClusterCandidate:
    term = ctx.school_term(school_id)
    return ClusterCandidate(
        members=(school_id,),
        spans=(GradeSpan(0, ctx.n_grades - 1),),
        contribution=term,
        member_terms=(term,),
        switchers=0.0,
    )


# --- Public cluster-level operations ---


def post_merger_enrollment(
    cluster: Cluster, school_id: str, instance: DistrictInstance
) -> dict[str, dict[str, float]]:
    """Grade-by-group enrollment of one cluster member after the merger.

    For grades in the member's span, counts sum over every cluster member's
    current enrollment; all other grades are zero.

    Args:
        cluster: the cluster containing the school.
        school_id: which member to materialize.
        instance: the enrollment source.

    Returns:
        A grade -> group -> count mapping covering the full grade domain.
    """
    if school_id not in cluster.span_map:
        raise KeyError(f"school {school_id} is not a member of this cluster")
    span = cluster.span_of(school_id)
    groups = instance.taxonomy.groups
    members = [instance.school(m) for m in cluster.members]
    out: dict[str, dict[str, float]] = {}
    for gi, grade in enumerate(instance.grade_domain):
        if span is not None and span.contains(gi):
            out[grade] = {
                group: math.fsum(m.enrollment[grade].get(group, 0) for m in members)
                for group in groups
            }
        else:
            out[grade] = {group: 0.0 for group in groups}
    return out


def check_capacity(
    cluster: Cluster, instance: DistrictInstance, p_min: float
) -> tuple[bool, list[str]]:
    """Check the enrollment band rules for one cluster.

    Every member's post-merger total must sit within [p_min * current,
    capacity]; additionally a member whose span ends below another member's
    must fit that higher school's band, since its students feed into it.
    Singleton clusters pass unconditionally: their post-merger state is the
    status quo, which is operable by definition even when the historical-max
    capacity proxy sits below current enrollment.

    Returns:
        (ok, violations) where violations lists human-readable rule breaks.
    """
    if cluster.size == 1:
        return True, []
    violations: list[str] = []
    current = {m: instance.school(m).total_students for m in cluster.members}
    post: dict[str, float] = {}
    for m in cluster.members:
        matrix = post_merger_enrollment(cluster, m, instance)
        post[m] = math.fsum(c for row in matrix.values() for c in row.values())

    for m in cluster.members:
        floor = p_min * current[m]
        if post[m] + _CAP_TOL < floor:
            violations.append(
                f"{m}: post-merger total {post[m]:g} below {floor:g} "
                f"({p_min:g} x current {current[m]:g})"
            )
        cap = instance.school(m).capacity
        if post[m] > cap + _CAP_TOL:
            violations.append(f"{m}: post-merger total {post[m]:g} exceeds capacity {cap:g}")

    for m in cluster.members:
        sp = cluster.span_of(m)
        if sp is None:
            continue
        for m2 in cluster.members:
            if m2 == m:
                continue
            sp2 = cluster.span_of(m2)
            if sp2 is None or sp2.end <= sp.end:
                continue
            floor = p_min * current[m2]
            if post[m] + _CAP_TOL < floor:
                violations.append(
                    f"{m}: post-merger total {post[m]:g} below {floor:g} "
                    f"({p_min:g} x current of downstream school {m2})"
                )
            cap2 = instance.school(m2).capacity
            if post[m] > cap2 + _CAP_TOL:
                violations.append(
                    f"{m}: post-merger total {post[m]:g} exceeds capacity "
                    f"{cap2:g} of downstream school {m2}"
                )
    return not violations, violations


def best_span_assignment(
    member_ids: Iterable[str],
    instance: DistrictInstance,
    p_min: float,
    taxonomy: GroupTaxonomy | None = None,
) -> tuple[dict[str, GradeSpan | None], float] | None:
    """Best capacity-feasible split of the grade domain among the members.

    Enumerates every assignment of contiguous grade segments to the member
    schools (all orderings), drops those failing check_capacity's rules, and
    returns the assignment minimizing the cluster's summed dissimilarity
    terms together with that sum. Returns None when no split is feasible.
    """
    members = tuple(sorted(member_ids))
    if len(members) not in (2, 3):
        raise ValueError("span assignment applies to pairs and triples")
    tax = taxonomy or instance.taxonomy
    ctx = _SolveContext(instance, tax, p_min)
    cand = _best_assignment(ctx, members)
    if cand is None:
        return None
    return dict(zip(cand.members, cand.spans)), cand.contribution


def _pair_allowed(instance: DistrictInstance, config: SolveConfig, a: str, b: str) -> bool:
    if normalize_pair(a, b) in config.forbidden_pairs:
        return False
    if not config.interdistrict:
        if instance.school(a).district_id != instance.school(b).district_id:
            return False
    return True


def _enumerate(ctx: _SolveContext, config: SolveConfig) -> list[ClusterCandidate]:
    instance = ctx.instance
    out = [_singleton_candidate(ctx, sid) for sid in instance.school_ids]

    pairs = [
        (a, b)
        for a, b in instance.adjacency
        if _pair_allowed(instance, config, a, b)
    ]
    for a, b in sorted(pairs):
        cand = _best_assignment(ctx, (a, b) if a <= b else (b, a))
        if cand is not None:
            out.append(cand)

    if config.allow_triples:
        pair_set = set(pairs)
        triangles = set()
        for a, b in pairs:
            common = instance.neighbors[a] & instance.neighbors[b]
            for c in common:
                edge_ac = normalize_pair(a, c)
                edge_bc = normalize_pair(b, c)
                if edge_ac in pair_set and edge_bc in pair_set:
                    triangles.add(tuple(sorted((a, b, c))))
        for tri in sorted(triangles):
            cand = _best_assignment(ctx, tri)
            if cand is not None:
                out.append(cand)
    return out


def enumerate_feasible_clusters(
    instance: DistrictInstance, config: SolveConfig | None = None
) -> list[ClusterCandidate]:
    """All clusters the search may use, each with its best split resolved.

    Singletons are always present. Pairs must be adjacent, unforbidden, and
    within one district unless interdistrict is on; triples additionally
    need all three edges. Pairs and triples with no capacity-feasible split
    are dropped.
    """
    cfg = config or SolveConfig()
    tax = _resolve_taxonomy(instance, cfg)
    ctx = _SolveContext(instance, tax, cfg.p_min)
    return _enumerate(ctx, cfg)


def _resolve_taxonomy(instance: DistrictInstance, config: SolveConfig) -> GroupTaxonomy:
    if config.objective_partition is None:
        return instance.taxonomy
    override = config.objective_partition
    known = set(instance.taxonomy.groups)
    unknown = sorted((set(override.focal) | set(override.complement)) - known)
    if unknown:
        raise ConfigConflictError(f"objective split names unknown groups: {unknown}")
    # Rebase onto the instance's group list so matrix lookups stay aligned.
    return GroupTaxonomy(instance.taxonomy.groups, override.focal, override.complement)


def named_objective(instance: DistrictInstance, name: str) -> GroupTaxonomy | None:
    """Resolve a named objective split against an instance's group labels.

    "white-vs-poc" keeps the instance's own focal split (returns None, no
    override). "bhwa" puts black and hispanic on the focal side against
    white and asian, leaving any other groups out of the index.
    """
    if name == "white-vs-poc":
        return None
    if name == "bhwa":
        labels = {g.lower(): g for g in instance.taxonomy.groups}
        focal = [labels[g] for g in ("black", "hispanic") if g in labels]
        complement = [labels[g] for g in ("white", "asian") if g in labels]
        if not focal or not complement:
            raise ConfigConflictError(
                "bhwa objective needs black/hispanic and white/asian groups; "
                f"instance has {list(instance.taxonomy.groups)}"
            )
        return GroupTaxonomy(instance.taxonomy.groups, tuple(focal), tuple(complement))
    raise ConfigConflictError(f"unknown objective name: {name}")


def _check_config(instance: DistrictInstance, config: SolveConfig) -> None:
    ids = set(instance.school_ids)
    for a, b in sorted(config.required_pairs):
        if a == b:
            raise ConfigConflictError(f"required pair repeats a school: {a}")
        for end in (a, b):
            if end not in ids:
                raise ConfigConflictError(f"required pair names unknown school: {end}")
        if not instance.is_adjacent(a, b):
            raise ConfigConflictError(f"required pair not adjacent: {a},{b}")
        if not config.interdistrict:
            if instance.school(a).district_id != instance.school(b).district_id:
                raise ConfigConflictError(
                    f"required pair crosses districts without interdistrict mode: {a},{b}"
                )
    for a, b in sorted(config.forbidden_pairs):
        for end in (a, b):
            if end not in ids:
                raise ConfigConflictError(f"forbidden pair names unknown school: {end}")


# --- Plan validation (shared by tests and solve's own output check) ---


def validate_plan(
    plan: MergerPlan,
    instance: DistrictInstance,
    config: SolveConfig | None = None,
) -> list[str]:
    """Every structural rule a plan must satisfy; returns violation messages.

    Checks the partition property, cluster sizes, pairwise adjacency (and
    the district rule), span disjointness and coverage of the grade domain,
    the empty-span rule, capacity bands, and any required/forbidden pairs in
    the config.
    """
    cfg = config or SolveConfig()
    violations: list[str] = []

    covered = [m for c in plan.clusters for m in c.members]
    if sorted(covered) != sorted(instance.school_ids):
        violations.append("plan does not partition the school set")

    n = len(instance.grade_domain)
    for c in plan.clusters:
        if c.size > 1:
            for a, b in itertools.combinations(c.members, 2):
                if not instance.is_adjacent(a, b):
                    violations.append(f"cluster {c.members}: {a} and {b} not adjacent")
                if not cfg.interdistrict:
                    if instance.school(a).district_id != instance.school(b).district_id:
                        violations.append(
                            f"cluster {c.members}: {a} and {b} cross district lines"
                        )
        if c.size == 1:
            sp = c.spans[0]
            if sp is None or sp.start != 0 or sp.end != n - 1:
                violations.append(f"singleton {c.members[0]} must span the full grade domain")
        grade_owner: dict[int, str] = {}
        for m, sp in zip(c.members, c.spans):
            if sp is None:
                if cfg.p_min != 0.0:
                    violations.append(
                        f"cluster {c.members}: {m} serves no grades at p_min > 0"
                    )
                continue
            if sp.start < 0 or sp.end >= n:
                violations.append(f"cluster {c.members}: span of {m} outside grade domain")
                continue
            for g in sp.indices():
                if g in grade_owner:
                    violations.append(
                        f"cluster {c.members}: grade index {g} assigned to both "
                        f"{grade_owner[g]} and {m}"
                    )
                grade_owner[g] = m
        missing = [g for g in range(n) if g not in grade_owner]
        if missing:
            violations.append(f"cluster {c.members}: grades {missing} served by nobody")
        ok, cap_violations = check_capacity(c, instance, cfg.p_min)
        if not ok:
            violations.extend(f"cluster {c.members}: {v}" for v in cap_violations)

    for a, b in sorted(cfg.required_pairs):
        ca = plan.cluster_of.get(a)
        if ca is None or b not in ca.members:
            violations.append(f"required pair not merged together: {a},{b}")
    for a, b in sorted(cfg.forbidden_pairs):
        ca = plan.cluster_of.get(a)
        if ca is not None and b in ca.members:
            violations.append(f"forbidden pair merged together: {a},{b}")
    return violations


# --- Exact search ---


def _plan_tiebreak_key(chosen: Sequence[ClusterCandidate]) -> tuple:
    switch_total = math.fsum(c.switchers for c in chosen)
    n_multi = sum(1 for c in chosen if c.size > 1)
    members_sig = tuple(sorted(c.members for c in chosen))
    return (switch_total, n_multi, members_sig)


class _Incumbent:
    def __init__(self) -> None:
        self.d = math.inf
        self.key: tuple | None = None
        self.chosen: list[ClusterCandidate] | None = None

    def offer(self, d: float, chosen: Sequence[ClusterCandidate]) -> bool:
        if d < self.d - _TIE_TOL:
            accept = True
        elif d <= self.d + _TIE_TOL:
            key = _plan_tiebreak_key(chosen)
            accept = self.key is None or key < self.key
        else:
            accept = False
        if accept:
            self.d = d
            self.key = _plan_tiebreak_key(chosen)
            self.chosen = list(chosen)
        return accept


def _branch_and_bound(
    ctx: _SolveContext,
    candidates: list[ClusterCandidate],
    incumbent: _Incumbent,
    deadline: float,
    cancel: threading.Event | None,
    stats: SearchStats,
    instrument: dict | None,
) -> bool:
    """DFS over per-school cluster choices. Returns True when exhaustive.

    Bound: contributions of clusters fixed so far plus, for every unassigned
    school, the smallest dissimilarity term it attains in any candidate
    containing it. Terms are non-negative and district totals are constants,
    so the bound never exceeds the value of any completion.
    """
    instance = ctx.instance
    degree = {sid: len(instance.neighbors[sid]) for sid in instance.school_ids}
    order = sorted(instance.school_ids, key=lambda s: (-degree[s], s))

    lb: dict[str, float] = {sid: math.inf for sid in order}
    for cand in candidates:
        for m, term in zip(cand.members, cand.member_terms):
            if term < lb[m]:
                lb[m] = term
    # Callers guarantee every school appears in some candidate.
    if any(math.isinf(v) for v in lb.values()):
        return True

    def delta(cand: ClusterCandidate) -> float:
        return cand.contribution - math.fsum(lb[m] for m in cand.members)

    by_school: dict[str, list[ClusterCandidate]] = {sid: [] for sid in order}
    for cand in candidates:
        for m in cand.members:
            by_school[m].append(cand)
    for sid in order:
        by_school[sid].sort(key=lambda c: (delta(c), c.size, c.members))

    assigned: dict[str, bool] = {sid: False for sid in order}
    chosen: list[ClusterCandidate] = []
    total_lb = math.fsum(lb.values())
    counter = [0]

    def tick() -> None:
        counter[0] += 1
        stats.nodes += 1
        if counter[0] % _CHECK_EVERY == 0:
            if time.monotonic() > deadline or (cancel is not None and cancel.is_set()):
                raise _SearchStop

    def dfs(idx: int, fixed: float, unassigned_lb: float) -> None:
        tick()
        while idx < len(order) and assigned[order[idx]]:
            idx += 1
        if idx == len(order):
            incumbent.offer(fixed / 2.0, chosen)
            return
        sid = order[idx]
        for cand in by_school[sid]:
            if any(assigned[m] for m in cand.members):
                continue
            members_lb = math.fsum(lb[m] for m in cand.members)
            bound = (fixed + cand.contribution + unassigned_lb - members_lb) / 2.0
            if bound > incumbent.d + _TIE_TOL:
                if instrument is not None:
                    instrument["prunes"] = instrument.get("prunes", 0) + 1
                    prev = instrument.get("min_pruned_bound")
                    if prev is None or bound < prev:
                        instrument["min_pruned_bound"] = bound
                break  # sorted by delta, every later candidate bounds higher
            for m in cand.members:
                assigned[m] = True
            chosen.append(cand)
            dfs(idx + 1, fixed + cand.contribution, unassigned_lb - members_lb)
            chosen.pop()
            for m in cand.members:
                assigned[m] = False

    try:
        dfs(0, 0.0, total_lb)
        return True
    except _SearchStop:
        return False


# --- Local search ---


def _descent(
    state: dict[frozenset[str], ClusterCandidate],
    cand_by_set: dict[frozenset[str], ClusterCandidate],
    multi_cands: list[ClusterCandidate],
    singleton_of: dict[str, ClusterCandidate],
    frozen: frozenset[str],
    deadline: float,
    cancel: threading.Event | None,
    stats: SearchStats,
) -> dict[frozenset[str], ClusterCandidate]:
    """Steepest descent over merge / dissolve / swap / absorb / shed moves."""

    def is_frozen(members: Iterable[str]) -> bool:
        return any(m in frozen for m in members)

    while True:
        if time.monotonic() > deadline or (cancel is not None and cancel.is_set()):
            raise _SearchStop
        singles = {next(iter(k)) for k in state if len(k) == 1}
        multis = sorted((k for k in state if len(k) > 1), key=lambda k: tuple(sorted(k)))

        best_delta = -_TIE_TOL
        best_apply: tuple[list[frozenset[str]], list[ClusterCandidate]] | None = None

        def consider(remove: list[frozenset[str]], add: list[ClusterCandidate]) -> None:
            nonlocal best_delta, best_apply
            gain = math.fsum(c.contribution for c in add) - math.fsum(
                state[k].contribution for k in remove
            )
            if gain < best_delta:
                best_delta = gain
                best_apply = (remove, add)

        # Merge: a feasible pair or triple whose members all sit alone now.
        for cand in multi_cands:
            if is_frozen(cand.members):
                continue
            if all(m in singles for m in cand.members):
                consider(
                    [frozenset((m,)) for m in cand.members],
                    [cand],
                )
        for key in multis:
            cand = state[key]
            if is_frozen(key):
                continue
            # Dissolve a cluster back into singletons.
            consider([key], [singleton_of[m] for m in cand.members])
            for m in sorted(key):
                rest = key - {m}
                # Shed one member of a triple, keeping the remaining pair.
                if len(key) == 3 and rest in cand_by_set:
                    consider([key], [cand_by_set[rest], singleton_of[m]])
                # Swap one member for a school currently alone.
                for x in sorted(singles):
                    if x in frozen:
                        continue
                    swapped = rest | {x}
                    if swapped in cand_by_set:
                        consider(
                            [key, frozenset((x,))],
                            [cand_by_set[swapped], singleton_of[m]],
                        )
            # Absorb a lone school into a pair, forming a triple.
            if len(key) == 2:
                for x in sorted(singles):
                    if x in frozen:
                        continue
                    grown = key | {x}
                    if grown in cand_by_set:
                        consider([key, frozenset((x,))], [cand_by_set[grown]])

        if best_apply is None:
            return state
        remove, add = best_apply
        for k in remove:
            del state[k]
        for cand in add:
            state[frozenset(cand.members)] = cand
        stats.nodes += 1


def _local_search(
    ctx: _SolveContext,
    candidates: list[ClusterCandidate],
    config: SolveConfig,
    incumbent: _Incumbent,
    deadline: float,
    cancel: threading.Event | None,
    stats: SearchStats,
) -> None:
    """Seeded-restart steepest descent; offers every local optimum found."""
    singleton_of = {c.members[0]: c for c in candidates if c.size == 1}
    multi_cands = sorted(
        (c for c in candidates if c.size > 1), key=lambda c: (c.contribution, c.members)
    )
    cand_by_set = {frozenset(c.members): c for c in candidates}
    # Schools in required pairs stay locked to their seeded cluster.
    frozen_ids = frozenset(m for pair in config.required_pairs for m in pair)

    def seed_required() -> dict[frozenset[str], ClusterCandidate] | None:
        state = {frozenset((sid,)): c for sid, c in singleton_of.items()}
        for a, b in sorted(config.required_pairs):
            if any(a in k and b in k for k in state if len(k) > 1):
                continue
            options = [
                c
                for c in multi_cands
                if a in c.members
                and b in c.members
                and all(frozenset((m,)) in state for m in c.members)
            ]
            if not options:
                return None
            pick = options[0]
            for m in pick.members:
                del state[frozenset((m,))]
            state[frozenset(pick.members)] = pick
        return state

    base = seed_required()
    if base is None:
        return

    def offer(state: dict[frozenset[str], ClusterCandidate]) -> None:
        chosen = [state[k] for k in sorted(state, key=lambda k: tuple(sorted(k)))]
        d = math.fsum(c.contribution for c in chosen) / 2.0
        incumbent.offer(d, chosen)

    offer(base)
    try:
        state = _descent(
            dict(base), cand_by_set, multi_cands, singleton_of, frozen_ids,
            deadline, cancel, stats,
        )
        offer(state)
        for r in range(LOCAL_SEARCH_RESTARTS):
            stats.restarts += 1
            rng = random.Random(config.seed * 100003 + r)
            state = dict(base)
            shuffled = multi_cands[:]
            rng.shuffle(shuffled)
            for cand in shuffled:
                if any(m in frozen_ids for m in cand.members):
                    continue
                if all(frozenset((m,)) in state for m in cand.members):
                    own = math.fsum(singleton_of[m].contribution for m in cand.members)
                    if cand.contribution < own - _TIE_TOL:
                        for m in cand.members:
                            del state[frozenset((m,))]
                        state[frozenset(cand.members)] = cand
            state = _descent(
                state, cand_by_set, multi_cands, singleton_of, frozen_ids,
                deadline, cancel, stats,
            )
            offer(state)
    except _SearchStop:
        pass


# --- Top-level solve ---


def solve(
    instance: DistrictInstance,
    config: SolveConfig | None = None,
    *,
    cancel: threading.Event | None = None,
    instrument: dict | None = None,
) -> SolveResult:
    """Find a merger plan minimizing post-merger dissimilarity.

    Small instances (at most EXACT_SCHOOL_LIMIT schools) run an exhaustive
    branch and bound; status comes back "optimal" unless the time limit or
    a cancellation interrupts it. Larger instances use local search and
    report "feasible". Identical (instance, config) inputs with the same
    seed produce identical plans.

    Ties in the objective fall to fewer switching students, then fewer
    merged clusters, then lexicographically smallest cluster members.

    Args:
        instance: the district to solve.
        config: solve knobs; defaults to SolveConfig().
        cancel: optional event observed at search-node boundaries.
        instrument: optional dict populated with search internals
            (candidates, prunes, min_pruned_bound).

    Raises:
        ConfigConflictError: required pairs not adjacent / forbidden /
            cross-district, or an objective split that does not fit the
            instance's groups or has degenerate totals.
    """
    cfg = config or SolveConfig()
    start = time.monotonic()
    deadline = start + cfg.time_limit
    _check_config(instance, cfg)
    tax = _resolve_taxonomy(instance, cfg)
    try:
        ctx = _SolveContext(instance, tax, cfg.p_min)
    except DegenerateTotalsError as exc:
        if cfg.objective_partition is not None:
            raise ConfigConflictError(str(exc)) from exc
        raise

    demos_before = [
        SchoolDemographics(sid, ctx.cum_t[sid][-1], ctx.cum_w[sid][-1])
        for sid in instance.school_ids
    ]
    d_before = dissimilarity(demos_before, ctx.t_total, ctx.w_total)

    candidates = _enumerate(ctx, cfg)
    if cfg.required_pairs:
        candidates = [
            c
            for c in candidates
            if all((a in c.members) == (b in c.members) for a, b in cfg.required_pairs)
        ]
    if instrument is not None:
        instrument["candidates"] = len(candidates)

    covered = {m for c in candidates for m in c.members}
    stats = SearchStats()
    if covered != set(instance.school_ids):
        stats.wall_time = time.monotonic() - start
        stats.method = "exact"
        log.info("solve: required pairs admit no covering clusters; infeasible")
        return SolveResult(None, d_before, None, "infeasible", stats, cfg)

    incumbent = _Incumbent()
    singleton_of = {c.members[0]: c for c in candidates if c.size == 1}
    if len(singleton_of) == len(instance.school_ids):
        # The status quo is always a feasible starting incumbent.
        identity_chosen = [singleton_of[sid] for sid in sorted(instance.school_ids)]
        incumbent.offer(math.fsum(c.contribution for c in identity_chosen) / 2.0, identity_chosen)

    exact = len(instance.schools) <= EXACT_SCHOOL_LIMIT
    if exact:
        stats.method = "exact"
        # A quick descent first gives the DFS a tight incumbent to prune with.
        _local_seed_for_exact(ctx, candidates, cfg, incumbent, deadline, cancel, stats)
        exhausted = _branch_and_bound(
            ctx, candidates, incumbent, deadline, cancel, stats, instrument
        )
        status = "optimal" if exhausted else "feasible"
    else:
        stats.method = "local"
        _local_search(ctx, candidates, cfg, incumbent, deadline, cancel, stats)
        status = "feasible"

    if incumbent.chosen is None:
        stats.wall_time = time.monotonic() - start
        return SolveResult(None, d_before, None, "infeasible", stats, cfg)

    plan = MergerPlan.build(c.cluster() for c in incumbent.chosen)
    d_after = _plan_dissimilarity(ctx, plan)
    if not cfg.required_pairs and d_after > d_before:
        # Tie-tolerance dust can, in principle, nudge an equal-valued plan a
        # hair past the baseline; the status quo is never worse than itself.
        plan = MergerPlan.identity(instance)
        d_after = _plan_dissimilarity(ctx, plan)

    stats.wall_time = time.monotonic() - start
    log.info(
        "solve %s: D %.6f -> %.6f (%s, %d nodes, %.2fs)",
        instance.name or "instance", d_before, d_after, status, stats.nodes, stats.wall_time,
    )
    return SolveResult(plan, d_before, d_after, status, stats, cfg)


def _local_seed_for_exact(
    ctx: _SolveContext,
    candidates: list[ClusterCandidate],
    config: SolveConfig,
    incumbent: _Incumbent,
    deadline: float,
    cancel: threading.Event | None,
    stats: SearchStats,
) -> None:
    singleton_of = {c.members[0]: c for c in candidates if c.size == 1}
    if len(singleton_of) != len(ctx.instance.school_ids) or config.required_pairs:
        return  # seeding is an optimization; skip awkward cases
    multi_cands = sorted(
        (c for c in candidates if c.size > 1), key=lambda c: (c.contribution, c.members)
    )
    cand_by_set = {frozenset(c.members): c for c in candidates}
    state = {frozenset((sid,)): c for sid, c in singleton_of.items()}
    try:
        state = _descent(
            state, cand_by_set, multi_cands, singleton_of, frozenset(),
            deadline, cancel, stats,
        )
    except _SearchStop:
        return
    chosen = [state[k] for k in sorted(state, key=lambda k: tuple(sorted(k)))]
    incumbent.offer(math.fsum(c.contribution for c in chosen) / 2.0, chosen)


def _plan_dissimilarity(ctx: _SolveContext, plan: MergerPlan) -> float:
    """Direct index evaluation over the plan's post-merger demographics."""
    demos = []
    for sid in ctx.instance.school_ids:
        cluster = plan.cluster_of[sid]
        cums = _cluster_cums(ctx, cluster.members)
        span = cluster.span_of(sid)
        w_post = _span_sum(cums[2], span)
        t_post = _span_sum(cums[1], span)
        demos.append(SchoolDemographics(sid, t_post, w_post))
    return dissimilarity(demos, ctx.t_total, ctx.w_total)


def plan_post_demographics(
    plan: MergerPlan,
    instance: DistrictInstance,
    taxonomy: GroupTaxonomy | None = None,
) -> list[SchoolDemographics]:
    """Post-merger (t_s, w_s) per school under a plan."""
    tax = taxonomy or instance.taxonomy
    ctx = _SolveContext(instance, tax, 0.0)
    out = []
    for sid in instance.school_ids:
        cluster = plan.cluster_of[sid]
        cums = _cluster_cums(ctx, cluster.members)
        span = cluster.span_of(sid)
        out.append(
            SchoolDemographics(sid, _span_sum(cums[1], span), _span_sum(cums[2], span))
        )
    return out


# --- Plan file round trip ---


def config_to_dict(config: SolveConfig) -> dict[str, Any]:
    objective = None
    if config.objective_partition is not None:
        objective = {
            "focal": list(config.objective_partition.focal),
            "complement": list(config.objective_partition.complement),
        }
    return {
        "p_min": config.p_min,
        "allow_triples": config.allow_triples,
        "time_limit": config.time_limit,
        "seed": config.seed,
        "required_pairs": sorted(list(p) for p in config.required_pairs),
        "forbidden_pairs": sorted(list(p) for p in config.forbidden_pairs),
        "objective_partition": objective,
        "interdistrict": config.interdistrict,
    }


def config_from_dict(data: Mapping[str, Any], instance: DistrictInstance | None = None) -> SolveConfig:
    objective = None
    raw_obj = data.get("objective_partition")
    if raw_obj is not None:
        if instance is None:
            raise ValueError("an instance is needed to rebuild an objective split")
        objective = GroupTaxonomy(
            instance.taxonomy.groups,
            tuple(raw_obj["focal"]),
            tuple(raw_obj["complement"]),
        )
    return SolveConfig(
        p_min=data.get("p_min", 0.8),
        allow_triples=data.get("allow_triples", True),
        time_limit=data.get("time_limit", DEFAULT_TIME_LIMIT),
        seed=data.get("seed", 0),
        required_pairs=frozenset(tuple(p) for p in data.get("required_pairs", [])),
        forbidden_pairs=frozenset(tuple(p) for p in data.get("forbidden_pairs", [])),
        objective_partition=objective,
        interdistrict=data.get("interdistrict", False),
    )


def solve_result_to_dict(result: SolveResult, instance: DistrictInstance) -> dict[str, Any]:
    """Serialize a solve result to the plan file shape."""
    domain = instance.grade_domain
    clusters = None
    if result.plan is not None:
        clusters = [
            {
                "members": list(c.members),
                "spans": {
                    m: ([domain[sp.start], domain[sp.end]] if sp is not None else None)
                    for m, sp in zip(c.members, c.spans)
                },
            }
            for c in result.plan.clusters
        ]
    return {
        "format": "merger-plan/1",
        "instance_name": instance.name,
        "school_ids": list(instance.school_ids),
        "d_before": result.d_before,
        "d_after": result.d_after,
        "status": result.status,
        "clusters": clusters,
        "config": config_to_dict(result.config),
        "stats": {
            "nodes": result.stats.nodes,
            "restarts": result.stats.restarts,
            "wall_time": result.stats.wall_time,
            "method": result.stats.method,
        },
    }


def plan_from_dict(data: Mapping[str, Any], instance: DistrictInstance) -> MergerPlan:
    """Rebuild a MergerPlan from plan-file data against a loaded instance."""
    if data.get("clusters") is None:
        raise ValueError("plan file holds no clusters (infeasible result?)")
    gidx = instance.grade_index
    known = set(instance.school_ids)
    seen: set[str] = set()
    clusters = []
    for raw in data["clusters"]:
        spans: dict[str, GradeSpan | None] = {}
        for m in raw["members"]:
            if m not in known:
                raise ValueError(
                    f"plan file names school {m!r} absent from instance "
                    f"{instance.name or '(unnamed)'}"
                )
            seen.add(m)
            sp = raw["spans"][m]
            if sp is None:
                spans[m] = None
            else:
                try:
                    lo, hi = gidx[sp[0]], gidx[sp[1]]
                except KeyError as exc:
                    raise ValueError(f"plan file names unknown grade {exc.args[0]!r}") from None
                spans[m] = GradeSpan(lo, hi)
        clusters.append(Cluster.build(spans))
    missing = known - seen
    if missing:
        raise ValueError(f"plan file covers only part of the instance; missing {sorted(missing)}")
    return MergerPlan.build(clusters)
