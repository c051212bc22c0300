"""Domain types for districts, schools, and enrollments, plus instance file I/O.

An instance file is a JSON document describing one district (or, in fused
mode, several): the ordered grade domain, the demographic group labels, the
focal split used by the segregation objective, per-school enrollment counts
indexed grade then group, and an undirected school adjacency list.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping


class InstanceFormatError(ValueError):
    """The file could not be parsed into the expected shape."""


class InstanceValidationError(ValueError):
    """The parsed instance violates a structural invariant."""


class CapacityWarning(UserWarning):
    """A school enrolls more students than its recorded capacity.

    Capacity is a historical-max proxy, so this is reported rather than
    rejected.
    """


@dataclass(frozen=True)
class GroupTaxonomy:
    """Group labels plus the two-sided split the dissimilarity index uses.

    ``focal`` and ``complement`` are disjoint, non-empty subsets of
    ``groups``. Labels on neither side stay in enrollment matrices for
    reporting but do not enter the index; alternative dichotomies (for
    example Black/Hispanic versus White/Asian) rely on that.
    """

    groups: tuple[str, ...]
    focal: tuple[str, ...]
    complement: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.groups:
            raise InstanceValidationError("no demographic groups defined")
        if len(set(self.groups)) != len(self.groups):
            raise InstanceValidationError("duplicate group labels")
        known = set(self.groups)
        for side, labels in (("focal", self.focal), ("complement", self.complement)):
            if not labels:
                raise InstanceValidationError(f"{side} side of the group split is empty")
            if len(set(labels)) != len(labels):
                raise InstanceValidationError(f"duplicate labels on the {side} side")
            unknown = sorted(set(labels) - known)
            if unknown:
                raise InstanceValidationError(f"unknown {side} groups: {unknown}")
        if set(self.focal) & set(self.complement):
            raise InstanceValidationError("focal and complement sides overlap")

    @classmethod
    def dichotomy(cls, groups: Iterable[str], focal: Iterable[str]) -> "GroupTaxonomy":
        """Build a split where the complement is every non-focal group."""
        groups_t = tuple(groups)
        focal_t = tuple(focal)
        focal_set = set(focal_t)
        complement = tuple(g for g in groups_t if g not in focal_set)
        return cls(groups_t, focal_t, complement)

    @cached_property
    def counted(self) -> frozenset[str]:
        """Groups that enter the index (either side of the split)."""
        return frozenset(self.focal) | frozenset(self.complement)


@dataclass(frozen=True)
class School:
    """One school: identity, capacity, and a grade-by-group enrollment matrix.

    ``enrollment`` maps grade label to a group-to-count mapping. Counts are
    non-negative and may be fractional (adjusted scenarios produce fractional
    students).
    """

    id: str
    district_id: str
    capacity: float
    enrollment: Mapping[str, Mapping[str, float]]

    def __post_init__(self) -> None:
        if not self.id:
            raise InstanceValidationError("school id must be non-empty")
        if not (isinstance(self.capacity, (int, float)) and math.isfinite(self.capacity)):
            raise InstanceValidationError(f"school {self.id}: capacity must be finite")
        if self.capacity < 0:
            raise InstanceValidationError(f"school {self.id}: negative capacity")
        for grade, row in self.enrollment.items():
            for group, count in row.items():
                if not (isinstance(count, (int, float)) and math.isfinite(count)):
                    raise InstanceValidationError(
                        f"school {self.id}: non-numeric count at grade {grade}, group {group}"
                    )
                if count < 0:
                    raise InstanceValidationError(
                        f"school {self.id}: negative count at grade {grade}, group {group}"
                    )

    @cached_property
    def total_students(self) -> float:
        """All students across every grade and group."""
        return math.fsum(c for row in self.enrollment.values() for c in row.values())

    def grade_total(self, grade: str) -> float:
        return math.fsum(self.enrollment.get(grade, {}).values())


def school_totals(school: School, taxonomy: GroupTaxonomy) -> tuple[float, float]:
    """Return ``(t_s, w_s)``: students counted by the split, and focal students.

    ``t_s`` sums over groups on either side of the split; groups outside the
    split are excluded. ``w_s`` sums the focal side only.
    """
    counted = taxonomy.counted
    focal = set(taxonomy.focal)
    t_s = math.fsum(
        c for row in school.enrollment.values() for g, c in row.items() if g in counted
    )
    w_s = math.fsum(
        c for row in school.enrollment.values() for g, c in row.items() if g in focal
    )
    return t_s, w_s


@dataclass(frozen=True)
class DistrictInstance:
    """A solver input universe: schools, adjacency, grade domain, taxonomy.

    Immutable after construction; safe to share across worker threads.
    """

    schools: tuple[School, ...]
    adjacency: tuple[tuple[str, str], ...]
    grade_domain: tuple[str, ...]
    taxonomy: GroupTaxonomy
    name: str = ""

    def __post_init__(self) -> None:
        _validate_instance(self)

    @cached_property
    def school_by_id(self) -> dict[str, School]:
        return {s.id: s for s in self.schools}

    @cached_property
    def school_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.schools)

    @cached_property
    def neighbors(self) -> dict[str, frozenset[str]]:
        nbrs: dict[str, set[str]] = {s.id: set() for s in self.schools}
        for a, b in self.adjacency:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return {k: frozenset(v) for k, v in nbrs.items()}

    @cached_property
    def district_ids(self) -> frozenset[str]:
        return frozenset(s.district_id for s in self.schools)

    @cached_property
    def grade_index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.grade_domain)}

    def school(self, school_id: str) -> School:
        try:
            return self.school_by_id[school_id]
        except KeyError:
            raise KeyError(f"unknown school id: {school_id}") from None

    def totals(self, taxonomy: GroupTaxonomy | None = None) -> tuple[float, float]:
        """District-wide ``(T, w_T)`` under the given (or native) split."""
        tax = taxonomy or self.taxonomy
        pairs = [school_totals(s, tax) for s in self.schools]
        return math.fsum(p[0] for p in pairs), math.fsum(p[1] for p in pairs)

    def is_adjacent(self, a: str, b: str) -> bool:
        return b in self.neighbors.get(a, frozenset())


def _validate_instance(inst: DistrictInstance) -> None:
    if not inst.schools:
        raise InstanceValidationError("instance has no schools")
    if not inst.grade_domain:
        raise InstanceValidationError("instance has an empty grade domain")
    if len(set(inst.grade_domain)) != len(inst.grade_domain):
        raise InstanceValidationError("duplicate grade labels in grade domain")

    ids = [s.id for s in inst.schools]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise InstanceValidationError(f"duplicate school ids: {dupes}")
    id_set = set(ids)

    domain = set(inst.grade_domain)
    known_groups = set(inst.taxonomy.groups)
    for s in inst.schools:
        served = set(s.enrollment.keys())
        missing = sorted(domain - served)
        if missing:
            raise InstanceValidationError(
                f"school {s.id} does not serve grades {missing}; every school "
                "must serve the full instance grade domain (mixed grade spans "
                "are not supported)"
            )
        extra = sorted(served - domain)
        if extra:
            raise InstanceValidationError(
                f"school {s.id} serves grades outside the instance domain: {extra}"
            )
        for grade, row in s.enrollment.items():
            unknown = sorted(set(row.keys()) - known_groups)
            if unknown:
                raise InstanceValidationError(
                    f"school {s.id}: unknown groups at grade {grade}: {unknown}"
                )

    seen_edges = set()
    for pair in inst.adjacency:
        a, b = pair
        if a == b:
            raise InstanceValidationError(f"self-adjacency for school {a}")
        for end in pair:
            if end not in id_set:
                raise InstanceValidationError(f"adjacency references unknown school id: {end}")
        key = (a, b) if a <= b else (b, a)
        if key in seen_edges:
            raise InstanceValidationError(f"duplicate adjacency edge: {key}")
        seen_edges.add(key)

    t_total, w_total = inst.totals()
    if t_total <= 0:
        raise InstanceValidationError("degenerate group totals: no counted students")
    if w_total <= 0 or w_total >= t_total:
        raise InstanceValidationError(
            "degenerate group totals: the focal side holds "
            f"{w_total} of {t_total} counted students"
        )

    for s in inst.schools:
        if s.total_students > s.capacity:
            warnings.warn(
                f"school {s.id} enrolls {s.total_students:g} students over "
                f"capacity {s.capacity:g}",
                CapacityWarning,
                stacklevel=3,
            )


def normalize_pair(a: str, b: str) -> tuple[str, str]:
    """Canonical unordered pair ordering used everywhere pairs are stored."""
    return (a, b) if a <= b else (b, a)


# --- File I/O ---


def instance_from_dict(data: Mapping[str, Any], name: str = "") -> DistrictInstance:
    """Build and validate a DistrictInstance from parsed JSON data."""
    if not isinstance(data, Mapping):
        raise InstanceFormatError("instance document must be a JSON object")
    required = ("grade_domain", "groups", "focal_groups", "schools", "adjacency")
    missing = [k for k in required if k not in data]
    if missing:
        raise InstanceFormatError(f"instance file missing fields: {missing}")

    grade_domain = data["grade_domain"]
    groups = data["groups"]
    focal_groups = data["focal_groups"]
    if not isinstance(grade_domain, list) or not all(isinstance(g, str) for g in grade_domain):
        raise InstanceFormatError("grade_domain must be a list of grade labels")
    if not isinstance(groups, list) or not all(isinstance(g, str) for g in groups):
        raise InstanceFormatError("groups must be a list of labels")
    if not isinstance(focal_groups, list) or not all(isinstance(g, str) for g in focal_groups):
        raise InstanceFormatError("focal_groups must be a list of labels")

    taxonomy = GroupTaxonomy.dichotomy(groups, focal_groups)

    raw_schools = data["schools"]
    if not isinstance(raw_schools, list):
        raise InstanceFormatError("schools must be an array")
    schools = []
    for i, raw in enumerate(raw_schools):
        if not isinstance(raw, Mapping):
            raise InstanceFormatError(f"schools[{i}] must be an object")
        for key in ("id", "district_id", "capacity", "enrollment"):
            if key not in raw:
                raise InstanceFormatError(f"schools[{i}] missing field: {key}")
        enrollment = raw["enrollment"]
        if not isinstance(enrollment, Mapping):
            raise InstanceFormatError(f"schools[{i}].enrollment must be an object")
        group_set = set(groups)
        matrix: dict[str, dict[str, float]] = {}
        for grade, row in enrollment.items():
            if not isinstance(row, Mapping):
                raise InstanceFormatError(
                    f"school {raw['id']}: enrollment at grade {grade} must be an object"
                )
            unknown = sorted(set(row.keys()) - group_set)
            if unknown:
                raise InstanceValidationError(
                    f"school {raw['id']}: unknown groups at grade {grade}: {unknown}"
                )
            # Missing groups within a served grade default to zero.
            matrix[grade] = {group: row.get(group, 0) for group in groups}
        schools.append(
            School(
                id=str(raw["id"]),
                district_id=str(raw["district_id"]),
                capacity=raw["capacity"],
                enrollment=matrix,
            )
        )

    raw_adjacency = data["adjacency"]
    if not isinstance(raw_adjacency, list):
        raise InstanceFormatError("adjacency must be an array of [id, id] pairs")
    adjacency = []
    for i, pair in enumerate(raw_adjacency):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise InstanceFormatError(f"adjacency[{i}] must be a 2-element array")
        adjacency.append(normalize_pair(str(pair[0]), str(pair[1])))
    adjacency.sort()

    return DistrictInstance(
        schools=tuple(schools),
        adjacency=tuple(adjacency),
        grade_domain=tuple(grade_domain),
        taxonomy=taxonomy,
        name=str(data.get("name", name)),
    )


def instance_to_dict(inst: DistrictInstance) -> dict[str, Any]:
    """Serialize an instance back to its file shape (round-trip stable)."""
    return {
        "name": inst.name,
        "grade_domain": list(inst.grade_domain),
        "groups": list(inst.taxonomy.groups),
        "focal_groups": list(inst.taxonomy.focal),
        "schools": [
            {
                "id": s.id,
                "district_id": s.district_id,
                "capacity": s.capacity,
                "enrollment": {
                    grade: {group: s.enrollment[grade].get(group, 0) for group in inst.taxonomy.groups}
                    for grade in inst.grade_domain
                },
            }
            for s in inst.schools
        ],
        "adjacency": [list(p) for p in inst.adjacency],
    }


def load_instance(path: str | Path) -> DistrictInstance:
    """Load, parse, and validate an instance file.

    Raises:
        InstanceFormatError: unreadable or structurally malformed file.
        InstanceValidationError: well-formed file violating an invariant
            (dangling adjacency id, degenerate group totals, mixed spans).
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InstanceFormatError(f"cannot read instance file {p}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"instance file {p} is not valid JSON: {exc}") from exc
    return instance_from_dict(data, name=p.stem)


def save_instance(inst: DistrictInstance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst), indent=2, sort_keys=False) + "\n")
