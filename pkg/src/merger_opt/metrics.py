"""Segregation and spatial-autocorrelation measures.

Two statistics live here. The dissimilarity index

    D = 1/2 * sum_s | w_s / w_T  -  (t_s - w_s) / (T - w_T) |

measures how unevenly focal students are spread over schools, where w_s and
t_s are a school's focal and counted totals and w_T, T the district totals.
Geary's C,

    C = [ sum_s sum_s' W_{s,s'} (x_s - x_s')^2 ]
        / [ (2 / (n - 1)) * sum_s (x_s - x_bar)^2 * sum_s sum_s' W_{s,s'} ],

measures spatial contrast between adjacent schools' focal shares x_s around
the district share x_bar, with n the number of included schools.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .district import DistrictInstance, GroupTaxonomy, school_totals


class MetricsError(ValueError):
    """Base class for metric preconditions."""


class DegenerateTotalsError(MetricsError):
    """Dissimilarity is undefined when w_T is 0 or equals T."""


class ZeroVarianceError(MetricsError):
    """Geary's C is undefined when every school has the same share."""


@dataclass(frozen=True)
class SchoolDemographics:
    """Counted and focal student totals for one school."""

    school_id: str
    t_s: float
    w_s: float

    def __post_init__(self) -> None:
        if not (0 <= self.w_s <= self.t_s):
            raise MetricsError(
                f"school {self.school_id}: focal count {self.w_s} outside [0, {self.t_s}]"
            )


def school_demographics(
    instance: DistrictInstance, taxonomy: GroupTaxonomy | None = None
) -> list[SchoolDemographics]:
    tax = taxonomy or instance.taxonomy
    out = []
    for s in instance.schools:
        t_s, w_s = school_totals(s, tax)
        out.append(SchoolDemographics(s.id, t_s, w_s))
    return out


def dissimilarity(
    demos: Iterable[SchoolDemographics], t_total: float, w_total: float
) -> float:
    """Dissimilarity index over school demographics, in [0, 1].

    Args:
        demos: per-school counted/focal totals.
        t_total: district counted total T.
        w_total: district focal total w_T, with 0 < w_T < T.

    Raises:
        DegenerateTotalsError: w_total is 0 or equals t_total.
    """
    if t_total <= 0 or w_total <= 0 or w_total >= t_total:
        raise DegenerateTotalsError(
            f"degenerate group totals: focal {w_total} of {t_total}"
        )
    c_total = t_total - w_total
    terms = []
    for d in demos:
        if d.t_s == 0:
            continue  # empty schools contribute nothing
        terms.append(abs(d.w_s / w_total - (d.t_s - d.w_s) / c_total))
    return 0.5 * math.fsum(terms)


def district_dissimilarity(
    instance: DistrictInstance, taxonomy: GroupTaxonomy | None = None
) -> float:
    """Status-quo dissimilarity of an instance under its (or a given) split."""
    tax = taxonomy or instance.taxonomy
    t_total, w_total = instance.totals(tax)
    return dissimilarity(school_demographics(instance, tax), t_total, w_total)


# --- Spatial autocorrelation ---


@dataclass(frozen=True)
class SpatialWeights:
    """School-to-school weights on the adjacency graph.

    Raw entries set W[s, s'] to the total population of s, the row school,
    for every adjacent pair (asymmetric before standardization, by
    construction). Row standardization then divides each row by its sum.
    Schools excluded from the graph (no usable neighbor, or no students to
    take a share over) are listed in ``excluded``.
    """

    entries: Mapping[tuple[str, str], float]
    row_standardized: bool
    included: tuple[str, ...]
    excluded: tuple[str, ...] = ()

    def row_sum(self, school_id: str) -> float:
        return math.fsum(w for (a, _), w in self.entries.items() if a == school_id)

    def total(self) -> float:
        return math.fsum(self.entries.values())


def build_spatial_weights(
    instance: DistrictInstance, taxonomy: GroupTaxonomy | None = None
) -> SpatialWeights:
    """Construct row-standardized adjacency weights for an instance.

    A school is included when it has at least one counted student (its share
    is otherwise undefined) and at least one neighbor that is itself
    included. The diagonal is zero throughout.
    """
    tax = taxonomy or instance.taxonomy
    population = {s.id: s.total_students for s in instance.schools}
    counted = {s.id: school_totals(s, tax)[0] for s in instance.schools}

    usable = {
        sid for sid in instance.school_ids if population[sid] > 0 and counted[sid] > 0
    }
    included = tuple(
        sid
        for sid in instance.school_ids
        if sid in usable and any(n in usable for n in instance.neighbors[sid])
    )
    included_set = set(included)
    excluded = tuple(sid for sid in instance.school_ids if sid not in included_set)

    raw: dict[tuple[str, str], float] = {}
    for sid in included:
        for nbr in sorted(instance.neighbors[sid]):
            if nbr in included_set:
                raw[(sid, nbr)] = population[sid]

    rows: dict[str, float] = {}
    for (a, _), w in raw.items():
        rows[a] = rows.get(a, 0.0) + w
    standardized = {key: w / rows[key[0]] for key, w in raw.items()}
    return SpatialWeights(
        entries=standardized,
        row_standardized=True,
        included=included,
        excluded=excluded,
    )


def focal_shares(
    instance: DistrictInstance, taxonomy: GroupTaxonomy | None = None
) -> dict[str, float]:
    """Per-school focal share w_s / t_s for schools with counted students."""
    tax = taxonomy or instance.taxonomy
    shares = {}
    for s in instance.schools:
        t_s, w_s = school_totals(s, tax)
        if t_s > 0:
            shares[s.id] = w_s / t_s
    return shares


def gearys_c(
    weights: SpatialWeights, x: Mapping[str, float], x_bar: float
) -> float:
    """Geary's C over included schools.

    Args:
        weights: spatial weights; ``weights.included`` defines the school set.
        x: per-school values (focal shares); must cover every included school.
        x_bar: the reference share, the district-wide focal proportion.

    Raises:
        MetricsError: fewer than two included schools or missing x values.
        ZeroVarianceError: all x values identical.
    """
    included = weights.included
    n = len(included)
    if n < 2:
        raise MetricsError(f"Geary's C needs at least 2 included schools, have {n}")
    missing = [sid for sid in included if sid not in x]
    if missing:
        raise MetricsError(f"missing x values for schools: {missing}")

    values = [x[sid] for sid in included]
    if min(values) == max(values):
        raise ZeroVarianceError("all school shares are identical; C is undefined")

    numerator = math.fsum(
        w * (x[a] - x[b]) ** 2 for (a, b), w in weights.entries.items()
    )
    spread = math.fsum((v - x_bar) ** 2 for v in values)
    denominator = (2.0 / (n - 1)) * spread * weights.total()
    if denominator == 0:
        raise ZeroVarianceError("zero variance denominator; C is undefined")
    return numerator / denominator


def district_geary(
    instance: DistrictInstance, taxonomy: GroupTaxonomy | None = None
) -> float:
    """Convenience wrapper: build weights, take shares, evaluate C."""
    tax = taxonomy or instance.taxonomy
    weights = build_spatial_weights(instance, tax)
    t_total, w_total = instance.totals(tax)
    if t_total <= 0:
        raise DegenerateTotalsError("no counted students in district")
    return gearys_c(weights, focal_shares(instance, tax), w_total / t_total)
