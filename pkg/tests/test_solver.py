"""Merger search: clusters, capacity rules, span splits, and the solver.

The heavy equivalence run against the reference enumerator lives in
test_acceptance; this module keeps targeted unit checks plus a smaller
randomized cross-check so failures localize.
"""

import json
import threading

import pytest

from bruteforce import BruteForce
from conftest import FIXTURES, build_instance, random_instance, solve_checked
from merger_opt import (
    Cluster,
    ConfigConflictError,
    GradeSpan,
    MergerPlan,
    SolveConfig,
    best_span_assignment,
    check_capacity,
    enumerate_feasible_clusters,
    named_objective,
    plan_from_dict,
    post_merger_enrollment,
    solve,
    solve_result_to_dict,
    validate_plan,
)

G6 = ["K", "1", "2", "3", "4", "5"]


def doc_pair(cap_a=130, cap_b=130):
    return {
        "name": "p",
        "grade_domain": G6,
        "groups": ["white", "poc"],
        "focal_groups": ["poc"],
        "schools": [
            {"id": "A", "district_id": "d", "capacity": cap_a,
             "enrollment": {g: {"white": 0, "poc": 20} for g in G6}},
            {"id": "B", "district_id": "d", "capacity": cap_b,
             "enrollment": {g: {"white": 20, "poc": 0} for g in G6}},
        ],
        "adjacency": [["A", "B"]],
    }


class TestClusterTypes:
    def test_span_basics(self):
        sp = GradeSpan(1, 3)
        assert sp.length == 3
        assert sp.contains(2) and not sp.contains(4)
        assert sp.label(G6) == "1-3"
        assert GradeSpan(2, 2).label(G6) == "2"
        with pytest.raises(ValueError):
            GradeSpan(3, 1)

    def test_cluster_build_sorts_members(self):
        c = Cluster.build({"b": GradeSpan(3, 5), "a": GradeSpan(0, 2)})
        assert c.members == ("a", "b")
        assert c.span_of("a") == GradeSpan(0, 2)
        assert c.serving(4) == "b"

    def test_cluster_size_bounds(self):
        spans = {f"s{i}": GradeSpan(i, i) for i in range(4)}
        with pytest.raises(ValueError):
            Cluster.build(spans)

    def test_plan_partition_helpers(self):
        inst = build_instance(doc_pair())
        plan = MergerPlan.identity(inst)
        assert plan.is_identity()
        assert plan.cluster_of["A"].members == ("A",)


class TestPostMergerEnrollment:
    def test_merged_counts(self):
        inst = build_instance(doc_pair())
        cluster = Cluster.build({"A": GradeSpan(0, 2), "B": GradeSpan(3, 5)})
        matrix = post_merger_enrollment(cluster, "A", inst)
        assert matrix["K"] == {"white": 20.0, "poc": 20.0}
        assert matrix["5"] == {"white": 0.0, "poc": 0.0}

    def test_non_member_rejected(self):
        inst = build_instance(doc_pair())
        cluster = Cluster.build({"A": GradeSpan(0, 5)})
        with pytest.raises(KeyError):
            post_merger_enrollment(cluster, "B", inst)


class TestCheckCapacity:
    def test_singleton_always_passes(self):
        d = doc_pair(cap_a=10)  # far below current enrollment
        inst = build_instance(d)
        ok, violations = check_capacity(
            Cluster.singleton("A", 6), inst, p_min=0.8
        )
        assert ok and violations == []

    def test_upper_bound_violation(self):
        # Merged K-2 total is 120; capacity 100 on the K-2 school fails.
        inst = build_instance(doc_pair(cap_a=100))
        cluster = Cluster.build({"A": GradeSpan(0, 2), "B": GradeSpan(3, 5)})
        ok, violations = check_capacity(cluster, inst, p_min=0.8)
        assert not ok
        assert any("exceeds capacity" in v for v in violations)

    def test_cross_member_lower_bound(self):
        # A keeps only grade K (40 students) while B's current total is
        # 100; 0.8 * 100 = 80 > 40 trips the rule that the low-span school
        # must hold the downstream school's cohort floor.
        grades = ["K", "1"]
        d = {
            "name": "x",
            "grade_domain": grades,
            "groups": ["white", "poc"],
            "focal_groups": ["poc"],
            "schools": [
                {"id": "A", "district_id": "d", "capacity": 400,
                 "enrollment": {g: {"white": 0, "poc": 20} for g in grades}},
                {"id": "B", "district_id": "d", "capacity": 400,
                 "enrollment": {g: {"white": 50, "poc": 0} for g in grades}},
            ],
            "adjacency": [["A", "B"]],
        }
        inst = build_instance(d)
        cluster = Cluster.build({"A": GradeSpan(0, 0), "B": GradeSpan(1, 1)})
        ok, violations = check_capacity(cluster, inst, p_min=0.8)
        assert not ok
        assert any("downstream" in v for v in violations)


class TestBestSpanAssignment:
    def test_even_pair_split(self):
        inst = build_instance(doc_pair())
        got = best_span_assignment(["A", "B"], inst, p_min=0.8)
        assert got is not None
        spans, contribution = got
        assert contribution == 0.0
        assert spans["A"] == GradeSpan(0, 2) and spans["B"] == GradeSpan(3, 5)

    def test_capacity_tight_unique_split(self):
        # Capacities chosen so exactly one of the ten pair splits fits:
        # combined per-grade total is 40, A must take exactly 2 grades
        # (80 <= 85) and B exactly 4 (160 <= 165); every other cut breaks
        # a bound. The p_min floor (0.5) keeps both schools open.
        d = doc_pair(cap_a=85, cap_b=165)
        inst = build_instance(d)
        got = best_span_assignment(["A", "B"], inst, p_min=0.5)
        assert got is not None
        spans, _ = got
        lengths = sorted(sp.length for sp in spans.values())
        assert lengths == [2, 4]
        assert spans["A"].length == 2

    def test_no_feasible_split(self):
        inst = build_instance(doc_pair(cap_a=90, cap_b=90))
        assert best_span_assignment(["A", "B"], inst, p_min=0.8) is None

    def test_empty_span_only_at_p_min_zero(self):
        # A's capacity (30) is below any single merged grade (40), so the
        # only way the pair works is closing A into B. That option exists
        # at p_min 0 and vanishes once a floor applies.
        d = doc_pair(cap_a=30, cap_b=300)
        inst = build_instance(d)
        got = best_span_assignment(["A", "B"], inst, p_min=0.0)
        assert got is not None
        spans, _ = got
        assert spans["A"] is None
        assert spans["B"] == GradeSpan(0, 5)
        assert best_span_assignment(["A", "B"], inst, p_min=0.5) is None


class TestEnumerate:
    def test_counts_on_quad(self):
        inst = build_instance(json.loads((FIXTURES / "quad.json").read_text()))
        cands = enumerate_feasible_clusters(inst, SolveConfig(p_min=0.0))
        sizes = {}
        for c in cands:
            sizes[len(c.members)] = sizes.get(len(c.members), 0) + 1
        assert sizes[1] == 4
        assert sizes[2] == 5  # five edges, all with feasible splits at p_min 0
        assert sizes[3] == 2  # triangles n1n2n3 and n1n3n4

    def test_forbidden_pair_removed(self):
        inst = build_instance(doc_pair())
        cands = enumerate_feasible_clusters(
            inst, SolveConfig(forbidden_pairs=frozenset({("A", "B")}))
        )
        assert all(len(c.members) == 1 for c in cands)

    def test_district_line_gating(self):
        d = doc_pair()
        d["schools"][1]["district_id"] = "other"
        inst = build_instance(d)
        within = enumerate_feasible_clusters(inst, SolveConfig())
        assert all(len(c.members) == 1 for c in within)
        across = enumerate_feasible_clusters(inst, SolveConfig(interdistrict=True))
        assert any(len(c.members) == 2 for c in across)


class TestConfig:
    def test_p_min_bounds(self):
        with pytest.raises(ConfigConflictError):
            SolveConfig(p_min=1.2)
        with pytest.raises(ConfigConflictError):
            SolveConfig(p_min=-0.1)

    def test_required_and_forbidden_overlap(self):
        with pytest.raises(ConfigConflictError, match="required and forbidden"):
            SolveConfig(
                required_pairs=frozenset({("a", "b")}),
                forbidden_pairs=frozenset({("b", "a")}),
            )

    def test_pairs_normalized(self):
        cfg = SolveConfig(required_pairs=frozenset({("z", "a")}))
        assert cfg.required_pairs == frozenset({("a", "z")})

    def test_named_objectives(self, quad_instance):
        assert named_objective(quad_instance, "white-vs-poc") is None
        tax = named_objective(quad_instance, "bhwa")
        assert set(tax.focal) == {"black", "hispanic"}
        assert set(tax.complement) == {"white", "asian"}
        with pytest.raises(ConfigConflictError):
            named_objective(quad_instance, "nonsense")

    def test_bhwa_needs_the_groups(self, pair_instance):
        with pytest.raises(ConfigConflictError):
            named_objective(pair_instance, "bhwa")

    def test_required_pair_must_be_adjacent(self, quad_instance):
        with pytest.raises(ConfigConflictError, match="not adjacent"):
            solve(quad_instance, SolveConfig(required_pairs=frozenset({("n2", "n4")})))

    def test_required_pair_unknown_school(self, quad_instance):
        with pytest.raises(ConfigConflictError, match="unknown school"):
            solve(quad_instance, SolveConfig(required_pairs=frozenset({("n1", "zz")})))

    def test_required_pair_across_districts_needs_flag(self):
        d = doc_pair()
        d["schools"][1]["district_id"] = "other"
        inst = build_instance(d)
        with pytest.raises(ConfigConflictError, match="interdistrict"):
            solve(inst, SolveConfig(required_pairs=frozenset({("A", "B")})))
        res = solve_checked(
            inst,
            SolveConfig(required_pairs=frozenset({("A", "B")}), interdistrict=True),
        )
        assert res.d_after == 0.0


class TestSolve:
    def test_pair_perfect_merge(self, pair_instance):
        res = solve_checked(pair_instance, SolveConfig(p_min=0.8, seed=0))
        assert res.status == "optimal"
        assert res.d_before == 1.0 and res.d_after == 0.0
        (cluster,) = res.plan.multi_clusters()
        assert cluster.members == ("A", "B")

    def test_identity_when_all_merges_forbidden(self, pair_instance):
        res = solve_checked(
            pair_instance,
            SolveConfig(forbidden_pairs=frozenset({("A", "B")})),
        )
        assert res.plan.is_identity()
        assert res.d_after == res.d_before  # bit-exact status quo

    def test_required_pair_kept(self, pair_instance):
        res = solve_checked(
            pair_instance, SolveConfig(required_pairs=frozenset({("A", "B")}))
        )
        cluster = res.plan.cluster_of["A"]
        assert "B" in cluster.members

    def test_required_pair_without_feasible_split_is_infeasible(self):
        inst = build_instance(doc_pair(cap_a=90, cap_b=90))
        res = solve(inst, SolveConfig(required_pairs=frozenset({("A", "B")})))
        assert res.status == "infeasible"
        assert res.plan is None and res.d_after is None

    def test_seed_does_not_change_exact_result(self, quad_instance):
        plans = set()
        for seed in (0, 1, 99):
            res = solve_checked(quad_instance, SolveConfig(p_min=0.5, seed=seed))
            assert res.status == "optimal"
            plans.add(tuple((c.members, c.spans) for c in res.plan.clusters))
        assert len(plans) == 1

    def test_repeat_solves_identical(self, checkerboard_instance):
        a = solve_checked(checkerboard_instance, SolveConfig(seed=3))
        b = solve_checked(checkerboard_instance, SolveConfig(seed=3))
        assert a.d_after == b.d_after
        assert [c.members for c in a.plan.clusters] == [c.members for c in b.plan.clusters]

    def test_checkerboard_reaches_zero(self, checkerboard_instance):
        res = solve_checked(checkerboard_instance, SolveConfig(p_min=0.8))
        assert res.status == "optimal"
        assert res.d_before == 1.0 and res.d_after == 0.0
        assert len(res.plan.multi_clusters()) == 8

    def test_coastal_half(self, coastal_instance):
        res = solve_checked(coastal_instance, SolveConfig(p_min=0.8))
        assert res.status == "optimal"
        assert res.d_before == 1.0
        assert abs(res.d_after - 0.5) < 1e-12

    def test_objective_override_changes_value(self, quad_instance):
        base = solve_checked(quad_instance, SolveConfig(p_min=0.8))
        alt = solve_checked(
            quad_instance,
            SolveConfig(p_min=0.8, objective_partition=named_objective(quad_instance, "bhwa")),
        )
        assert base.d_before != alt.d_before

    def test_cancel_stops_search(self, checkerboard_instance):
        cancel = threading.Event()
        cancel.set()
        res = solve(checkerboard_instance, SolveConfig(p_min=0.8), cancel=cancel)
        assert res.status == "feasible"  # incumbent returned, not proven
        assert res.d_after is not None and res.d_after <= res.d_before + 1e-12

    def test_time_limit_degrades_not_crashes(self, checkerboard_instance):
        res = solve(checkerboard_instance, SolveConfig(p_min=0.8, time_limit=1e-9))
        assert res.status in ("feasible", "optimal")
        assert res.d_after is not None

    def test_monotone_in_p_min_on_fixtures(self, quad_instance, coastal_instance):
        for inst in (quad_instance, coastal_instance):
            values = []
            for p in (0.0, 0.5, 0.8):
                res = solve_checked(inst, SolveConfig(p_min=p, seed=0))
                assert res.status == "optimal"
                values.append(res.d_after)
            assert values[0] <= values[1] + 1e-12 <= values[2] + 2e-12

    def test_improvement_guarantee_random(self):
        for seed in range(20):
            inst = random_instance(900 + seed)
            res = solve_checked(inst, SolveConfig(p_min=0.8, seed=seed))
            assert res.d_after <= res.d_before + 1e-12


class TestOracleSpotChecks:
    @pytest.mark.parametrize("seed", range(12))
    def test_matches_bruteforce(self, seed):
        inst = random_instance(7000 + seed)
        for p_min in (0.0, 0.5, 0.8):
            res = solve_checked(inst, SolveConfig(p_min=p_min, seed=seed))
            oracle = BruteForce(inst, p_min=p_min).best_d()
            assert res.d_after == pytest.approx(oracle, abs=1e-9)

    def test_no_triples_matches(self):
        inst = random_instance(7777)
        res = solve_checked(inst, SolveConfig(p_min=0.5, allow_triples=False))
        oracle = BruteForce(inst, p_min=0.5, allow_triples=False).best_d()
        assert res.d_after == pytest.approx(oracle, abs=1e-9)


class TestLocalSearch:
    @staticmethod
    def chain_instance(n=26):
        grades = ["K", "1", "2", "3"]
        schools = []
        for i in range(n):
            focal = i % 2 == 0
            schools.append(
                {
                    "id": f"c{i:02d}",
                    "district_id": "chain",
                    "capacity": 90,
                    "enrollment": {
                        g: {"white": 0 if focal else 10, "poc": 10 if focal else 0}
                        for g in grades
                    },
                }
            )
        edges = [[f"c{i:02d}", f"c{i+1:02d}"] for i in range(n - 1)]
        return build_instance(
            {
                "name": "chain",
                "grade_domain": grades,
                "groups": ["white", "poc"],
                "focal_groups": ["poc"],
                "schools": schools,
                "adjacency": edges,
            }
        )

    def test_large_instance_uses_local_search(self):
        inst = self.chain_instance()
        res = solve_checked(inst, SolveConfig(p_min=0.8, seed=1))
        assert res.stats.method == "local"
        assert res.status == "feasible"
        # A perfect matching along the chain zeroes the index; the descent
        # plus restarts should get at least most of the way there.
        assert res.d_before == 1.0
        assert res.d_after < 0.2

    def test_local_search_deterministic_per_seed(self):
        inst = self.chain_instance()
        a = solve_checked(inst, SolveConfig(p_min=0.8, seed=5))
        b = solve_checked(inst, SolveConfig(p_min=0.8, seed=5))
        assert [c.members for c in a.plan.clusters] == [c.members for c in b.plan.clusters]


class TestSerialization:
    def test_plan_round_trip(self, quad_instance):
        res = solve_checked(quad_instance, SolveConfig(p_min=0.5))
        doc = solve_result_to_dict(res, quad_instance)
        again = plan_from_dict(doc, quad_instance)
        assert again == res.plan

    def test_golden_pair_plan(self, pair_instance):
        res = solve_checked(pair_instance, SolveConfig(p_min=0.8, seed=0))
        doc = solve_result_to_dict(res, pair_instance)
        doc["stats"]["wall_time"] = 0.0
        golden = json.loads((FIXTURES / "golden" / "pair.plan.json").read_text())
        assert doc == golden

    def test_infeasible_plan_file_rejected_on_load(self, pair_instance):
        with pytest.raises(ValueError):
            plan_from_dict({"clusters": None}, pair_instance)


class TestValidatePlanNegative:
    def test_bad_plans_are_reported(self, quad_instance):
        n = len(quad_instance.grade_domain)
        # Non-adjacent pair n2, n4 merged.
        bad = MergerPlan.build(
            [
                Cluster.build({"n2": GradeSpan(0, 2), "n4": GradeSpan(3, n - 1)}),
                Cluster.singleton("n1", n),
                Cluster.singleton("n3", n),
            ]
        )
        violations = validate_plan(bad, quad_instance)
        assert any("not adjacent" in v for v in violations)

    def test_missing_school_reported(self, quad_instance):
        n = len(quad_instance.grade_domain)
        partial = MergerPlan.build(
            [Cluster.singleton(sid, n) for sid in ("n1", "n2", "n3")]
        )
        violations = validate_plan(partial, quad_instance)
        assert any("partition" in v for v in violations)

    def test_gap_in_spans_reported(self, quad_instance):
        plan = MergerPlan.build(
            [
                Cluster.build({"n1": GradeSpan(0, 1), "n2": GradeSpan(3, 5)}),
                Cluster.singleton("n3", 6),
                Cluster.singleton("n4", 6),
            ]
        )
        violations = validate_plan(plan, quad_instance)
        assert any("served by nobody" in v for v in violations)

    def test_overlap_reported(self, quad_instance):
        plan = MergerPlan.build(
            [
                Cluster.build({"n1": GradeSpan(0, 3), "n2": GradeSpan(2, 5)}),
                Cluster.singleton("n3", 6),
                Cluster.singleton("n4", 6),
            ]
        )
        violations = validate_plan(plan, quad_instance)
        assert any("assigned to both" in v for v in violations)

    def test_empty_span_above_p_min_zero_reported(self, pair_instance):
        plan = MergerPlan.build(
            [Cluster.build({"A": None, "B": GradeSpan(0, 5)})]
        )
        violations = validate_plan(plan, pair_instance, SolveConfig(p_min=0.8))
        assert any("serves no grades" in v for v in violations)
