"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import random
import warnings
from pathlib import Path

import pytest

from merger_opt import (
    CapacityWarning,
    DistrictInstance,
    SolveConfig,
    instance_from_dict,
    load_instance,
    solve,
    validate_plan,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


def load_fixture(name: str) -> DistrictInstance:
    return load_instance(FIXTURES / f"{name}.json")


@pytest.fixture(scope="session")
def pair_instance() -> DistrictInstance:
    return load_fixture("pair")


@pytest.fixture(scope="session")
def quad_instance() -> DistrictInstance:
    return load_fixture("quad")


@pytest.fixture(scope="session")
def flows_instance() -> DistrictInstance:
    return load_fixture("flows")


@pytest.fixture(scope="session")
def checkerboard_instance() -> DistrictInstance:
    return load_fixture("checkerboard")


@pytest.fixture(scope="session")
def coastal_instance() -> DistrictInstance:
    return load_fixture("coastal")


def build_instance(doc: dict) -> DistrictInstance:
    """instance_from_dict with capacity warnings silenced (tests opt in)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapacityWarning)
        return instance_from_dict(doc)


def random_instance(seed: int) -> DistrictInstance:
    """Small random district: 4-7 schools, edge probability one half.

    Group totals are nudged when a draw comes out degenerate so the index
    is always defined. Capacities sit between 0.9x and 1.5x current
    enrollment, so some mergers are capacity-tight and some schools carry
    a load warning.
    """
    rng = random.Random(seed)
    n_schools = rng.randint(4, 7)
    n_grades = rng.randint(3, 6)
    domain = [f"g{i}" for i in range(n_grades)]
    ids = [f"s{i}" for i in range(n_schools)]

    schools = []
    for sid in ids:
        enrollment = {
            g: {"white": rng.randint(0, 40), "poc": rng.randint(0, 40)}
            for g in domain
        }
        schools.append(enrollment)

    # The focal side must hold some, but not all, of the students.
    if sum(e[g]["poc"] for e in schools for g in domain) == 0:
        schools[0][domain[0]]["poc"] = 5
    if sum(e[g]["white"] for e in schools for g in domain) == 0:
        schools[0][domain[0]]["white"] = 5

    school_docs = []
    for sid, enrollment in zip(ids, schools):
        current = sum(sum(row.values()) for row in enrollment.values())
        capacity = max(1.0, current * rng.uniform(0.9, 1.5))
        school_docs.append(
            {
                "id": sid,
                "district_id": "d0",
                "capacity": round(capacity, 1),
                "enrollment": enrollment,
            }
        )

    adjacency = []
    for i in range(n_schools):
        for j in range(i + 1, n_schools):
            if rng.random() < 0.5:
                adjacency.append([ids[i], ids[j]])

    return build_instance(
        {
            "name": f"rand{seed}",
            "grade_domain": domain,
            "groups": ["white", "poc"],
            "focal_groups": ["poc"],
            "schools": school_docs,
            "adjacency": adjacency,
        }
    )


def solve_checked(instance: DistrictInstance, config: SolveConfig | None = None, **kwargs):
    """solve() plus a zero-violations assertion on whatever plan comes back."""
    result = solve(instance, config, **kwargs)
    if result.plan is not None:
        violations = validate_plan(result.plan, instance, result.config)
        assert violations == [], f"plan violates constraints: {violations}"
    return result
