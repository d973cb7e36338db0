import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import leg_sum_cost, random_instance
from routeforge.cvrp import (
    Instance,
    InstanceError,
    evaluate_solution,
    format_gap,
    gap,
    make_solution,
    parse_bks_table,
    parse_instance,
    read_solution_text,
    serialize_instance,
    write_solution_text,
)

MINIMAL = """\
NAME : tiny
TYPE : CVRP
DIMENSION : 3
EDGE_WEIGHT_TYPE : EUC_2D
CAPACITY : 10
NODE_COORD_SECTION
1 0 0
2 3 4
3 6 8
DEMAND_SECTION
1 0
2 4
3 5
DEPOT_SECTION
1
-1
EOF
"""


class TestParse:
    def test_minimal_file(self):
        inst = parse_instance(MINIMAL)
        assert inst.name == "tiny"
        assert inst.n_customers == 2
        assert inst.capacity == 10
        assert np.array_equal(inst.depot, [0, 0])
        assert np.array_equal(inst.coords, [[3, 4], [6, 8]])
        assert np.array_equal(inst.demands, [4, 5])

    def test_demand_exceeds_capacity(self):
        bad = MINIMAL.replace("2 4", "2 15")
        with pytest.raises(InstanceError, match="demand exceeds capacity"):
            parse_instance(bad)

    def test_round_trip_identity(self):
        inst = parse_instance(MINIMAL)
        again = parse_instance(serialize_instance(inst))
        assert again == inst
        assert parse_instance(serialize_instance(again)) == again

    def test_float_coords_round_trip(self):
        rng = np.random.default_rng(7)
        inst = Instance(name="f", depot=rng.uniform(0, 10, 2),
                        coords=rng.uniform(0, 10, (5, 2)),
                        demands=np.ones(5), capacity=3.5)
        assert parse_instance(serialize_instance(inst)) == inst

    @pytest.mark.parametrize("mutation,msg", [
        (lambda t: t.replace("NODE_COORD_SECTION\n1 0 0\n2 3 4\n3 6 8\n", ""),
         "NODE_COORD_SECTION"),
        (lambda t: t.replace("DEMAND_SECTION\n1 0\n2 4\n3 5\n", ""),
         "DEMAND_SECTION"),
        (lambda t: t.replace("DEPOT_SECTION\n1\n-1\n", ""), "DEPOT_SECTION"),
        (lambda t: t.replace("CAPACITY : 10\n", ""), "CAPACITY"),
        (lambda t: t.replace("2 3 4", "2 3 x"), "line 8"),
        (lambda t: t.replace("EUC_2D", "EXPLICIT"), "EDGE_WEIGHT_TYPE"),
    ])
    def test_errors_carry_context(self, mutation, msg):
        with pytest.raises(InstanceError, match=msg):
            parse_instance(mutation(MINIMAL))


class TestDistance:
    def test_triangle(self):
        inst = parse_instance(MINIMAL)
        assert inst.distance(0, 1) == 5.0

    def test_rounding_rule(self):
        inst = Instance(name="r", depot=[0, 0], coords=[[1, 1]],
                        demands=[1], capacity=5)
        assert inst.distance(0, 1) == 1.0

    def test_exact_mode(self):
        inst = Instance(name="e", depot=[0, 0], coords=[[1, 1]],
                        demands=[1], capacity=5, rounding_mode="exact-float")
        assert inst.distance(0, 1) == pytest.approx(np.sqrt(2))

    def test_invalid_id(self):
        inst = parse_instance(MINIMAL)
        with pytest.raises(InstanceError):
            inst.distance(0, 3)

    @given(st.integers(0, 2**31), st.integers(2, 12))
    @settings(max_examples=30, deadline=None)
    def test_metric_properties(self, seed, n):
        inst = random_instance(np.random.default_rng(seed), n)
        d = inst.distance_matrix()
        assert np.array_equal(d, d.T)
        assert (d >= 0).all()
        assert np.diagonal(d).sum() == 0


class TestEvaluate:
    def test_out_and_back(self):
        inst = Instance(name="x", depot=[0, 0], coords=[[3, 4]],
                        demands=[2], capacity=5)
        cost, feasible, violations = evaluate_solution(inst, [[1]])
        assert cost == 10.0
        assert feasible and not violations

    def test_two_overloads(self):
        inst = Instance(name="x", depot=[0, 0],
                        coords=[[1, 0], [2, 0], [3, 0], [4, 0]],
                        demands=[3, 3, 3, 3], capacity=5)
        cost, feasible, violations = evaluate_solution(inst, [[1, 2], [3, 4]])
        assert not feasible
        assert sum(v.kind == "overload" for v in violations) == 2

    def test_missing_and_duplicate(self):
        inst = Instance(name="x", depot=[0, 0],
                        coords=[[1, 0], [2, 0], [3, 0]],
                        demands=[1, 1, 1], capacity=5)
        _, feasible, violations = evaluate_solution(inst, [[1, 2], [2]])
        kinds = sorted(v.kind for v in violations)
        assert not feasible
        assert kinds == ["duplicate", "missing"]

    def test_unknown_customer(self):
        inst = parse_instance(MINIMAL)
        with pytest.raises(InstanceError, match="unknown customer"):
            evaluate_solution(inst, [[1, 9]])

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_matches_leg_sum_oracle(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, 4)
        perm = rng.permutation([1, 2, 3, 4])
        routes = [perm[:2].tolist(), perm[2:].tolist()]
        cost, _, _ = evaluate_solution(inst, routes)
        assert cost == pytest.approx(leg_sum_cost(inst, routes), abs=1e-9)


class TestGap:
    def test_identity(self):
        assert gap(100.0, 100.0) == 0.0

    def test_four_percent(self):
        assert gap(104.0, 100.0) == pytest.approx(0.04)

    def test_formatting(self):
        assert format_gap(0.0005) == "0.05%"

    def test_missing_bks(self):
        with pytest.raises(ValueError):
            gap(100.0, None)
        with pytest.raises(ValueError):
            gap(100.0, 0.0)


class TestSolutionFiles:
    def test_write_read_round_trip(self):
        inst = parse_instance(MINIMAL)
        sol = make_solution(inst, [[1], [2]])
        text = write_solution_text(sol)
        assert "Route #1: 1" in text and "Route #2: 2" in text
        assert text.splitlines()[-1].startswith("Cost ")
        again = read_solution_text(inst, text)
        assert again == sol

    def test_bks_table(self):
        table = parse_bks_table("# comment\nX-n101-k25 27591\ntiny 20\n")
        assert table == {"X-n101-k25": 27591.0, "tiny": 20.0}
        with pytest.raises(InstanceError, match="line 1"):
            parse_bks_table("justonecolumn\n")


class TestInvariants:
    def test_stored_cost_is_recomputation(self):
        inst = parse_instance(MINIMAL)
        sol = make_solution(inst, [[2, 1]])
        cost, _, _ = evaluate_solution(inst, [r.sequence for r in sol.routes])
        assert sol.cost == cost

    @given(st.integers(0, 2**31), st.integers(1, 9))
    @settings(max_examples=25, deadline=None)
    def test_partition_property(self, seed, n):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, n, capacity=100.0)
        perm = rng.permutation(np.arange(1, n + 1))
        cut = int(rng.integers(0, n))
        routes = [r for r in (perm[:cut].tolist(), perm[cut:].tolist()) if r]
        _, feasible, _ = evaluate_solution(inst, routes)
        assert feasible
        assert sorted(make_solution(inst, routes).customers()) == list(range(1, n + 1))
