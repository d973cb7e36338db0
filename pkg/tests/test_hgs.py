import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    brute_force_optimum,
    penalized,
    random_instance,
    split_enumeration_optimum,
)
from routeforge import hgs
from routeforge.cvrp import Instance, evaluate_solution
from routeforge.hgs import (
    Budget,
    HgsConfig,
    HgsSolver,
    OperatorToggles,
    granular_neighbors,
    local_search,
    ox_crossover,
    split,
)


def line_instance():
    return Instance(name="line", depot=[0, 0],
                    coords=[[1, 0], [2, 0], [3, 0]],
                    demands=[4, 4, 4], capacity=8)


class TestSplit:
    def test_line_fixture(self):
        inst = line_instance()
        routes = split([1, 2, 3], inst, penalty=1000.0)
        assert [r.tolist() for r in routes] == [[1], [2, 3]]
        assert penalized(inst, routes, 1000.0) == 8.0

    def test_single_customer(self):
        inst = Instance(name="one", depot=[0, 0], coords=[[2, 0]],
                        demands=[1], capacity=5)
        routes = split([1], inst, penalty=10.0)
        assert [r.tolist() for r in routes] == [[1]]

    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            split([1, 1, 2], line_instance(), penalty=1.0)

    @given(st.integers(0, 2**31), st.integers(2, 7))
    @settings(max_examples=40, deadline=None)
    def test_matches_enumeration(self, seed, n):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, n, capacity=15.0)
        tour = rng.permutation(np.arange(1, n + 1))
        pen = float(rng.uniform(0.5, 50.0))
        routes = split(tour, inst, penalty=pen)
        got = penalized(inst, routes, pen)
        want = split_enumeration_optimum(inst, tour, pen)
        assert got == pytest.approx(want, abs=1e-9)
        assert np.concatenate(routes).tolist() == tour.tolist()

    def test_single_route_when_cheapest(self):
        rng = np.random.default_rng(5)
        inst = random_instance(rng, 5, capacity=1000.0)
        tour = [1, 2, 3, 4, 5]
        routes = split(tour, inst, penalty=1e6)
        want = split_enumeration_optimum(inst, tour, 1e6)
        assert penalized(inst, routes, 1e6) == pytest.approx(want)


class TestOxCrossover:
    def test_identical_parents(self):
        rng = np.random.default_rng(0)
        p = np.array([3, 1, 4, 2], dtype=np.int32)
        child = ox_crossover(p, p, rng)
        assert child.tolist() == p.tolist()

    @given(st.integers(0, 2**31), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_permutation_closure(self, seed, n):
        rng = np.random.default_rng(seed)
        pa = rng.permutation(np.arange(1, n + 1))
        pb = rng.permutation(np.arange(1, n + 1))
        child = ox_crossover(pa, pb, np.random.default_rng(seed + 1))
        assert sorted(child.tolist()) == list(range(1, n + 1))

    def test_determinism(self):
        pa = np.array([1, 2, 3, 4])
        pb = np.array([4, 3, 2, 1])
        c1 = ox_crossover(pa, pb, np.random.default_rng(9))
        c2 = ox_crossover(pa, pb, np.random.default_rng(9))
        assert c1.tolist() == c2.tolist()

    def test_mismatched_sets(self):
        with pytest.raises(ValueError):
            ox_crossover([1, 2], [2, 3], np.random.default_rng(0))


def _kernel_move_candidates(inst, routes, gamma, toggles):
    """Every move the kernel's operators can make, applied on copies."""
    neighbors = granular_neighbors(inst, gamma)
    routes = [list(r) for r in routes]
    pos = {}
    for ri, seq in enumerate(routes):
        for k, c in enumerate(seq):
            pos[c] = (ri, k)

    def clone():
        return [list(r) for r in routes]

    n = inst.n_customers
    for u in range(1, n + 1):
        ru, iu = pos[u]
        if toggles.relocate and len(routes[ru]) > 1:
            new = clone()
            new[ru].remove(u)
            new.append([u])
            yield new
        for v in neighbors[u]:
            v = int(v)
            if v <= 0:
                break
            rv, jv = pos[v]
            if toggles.relocate:
                for after in (True, False):
                    new = clone()
                    new[ru].remove(u)
                    tgt = new[rv].index(v) + (1 if after else 0)
                    new[rv].insert(tgt, u)
                    yield [r for r in new if r]
            if toggles.swap11:
                new = clone()
                new[ru][iu], new[rv][jv] = new[rv][jv], new[ru][iu]
                yield new
            for seg, on in ((2, toggles.swap22), (3, toggles.swap33)):
                if not on:
                    continue
                if iu + seg > len(routes[ru]) or jv + seg > len(routes[rv]):
                    continue
                if ru == rv and not (iu + seg < jv or jv + seg < iu):
                    continue
                new = clone()
                su = routes[ru][iu:iu + seg]
                sv = routes[rv][jv:jv + seg]
                new[ru][iu:iu + seg] = sv
                new[rv][jv:jv + seg] = su
                yield new
            if toggles.two_opt and ru == rv and u != v:
                lo, hi = sorted((iu, jv))
                if hi - lo >= 2:
                    new = clone()
                    new[ru][lo + 1:hi + 1] = new[ru][lo + 1:hi + 1][::-1]
                    yield new
            if toggles.two_opt_star and ru != rv:
                new = clone()
                tail_u = routes[ru][iu + 1:]
                tail_v = routes[rv][jv + 1:]
                new[ru] = routes[ru][:iu + 1] + tail_v
                new[rv] = routes[rv][:jv + 1] + tail_u
                yield [r for r in new if r]


class TestLocalSearch:
    def test_crossing_square(self):
        # route visits opposite corners first: guaranteed crossing
        inst = Instance(name="sq", depot=[0, 0],
                        coords=[[10, 0], [10, 10], [0, 10], [-5, 5]],
                        demands=[1, 1, 1, 1], capacity=10)
        config = HgsConfig(seed=1, granularity=3)
        solver = HgsSolver(inst, config)
        bad = solver.individual_from_routes([[2, 1, 3, 4]])
        out = local_search(bad, inst, config)
        assert out.penalized_cost < bad.penalized_cost

    def test_fixed_point(self):
        # with a stiff penalty the optimal split is a local optimum
        inst = line_instance()
        config = HgsConfig(seed=2, granularity=2)
        solver = HgsSolver(inst, config)
        good = solver.individual_from_routes([[1], [2, 3]])
        out = local_search(good, inst, config, penalty=1000.0)
        assert [r.tolist() for r in out.routes] == [[1], [2, 3]]
        assert out.cost == good.cost

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_monotone_descent(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, 10, capacity=20.0)
        config = HgsConfig(seed=seed % 1000, granularity=5)
        solver = HgsSolver(inst, config)
        tour = rng.permutation(np.arange(1, 11))
        cut = int(rng.integers(1, 10))
        start = solver.individual_from_routes(
            [tour[:cut].tolist(), tour[cut:].tolist()])
        out = local_search(start, inst, config)
        assert out.penalized_cost <= start.penalized_cost + 1e-9

    @given(st.integers(0, 2**31))
    @settings(max_examples=15, deadline=None)
    def test_local_optimality_vs_move_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng, 8, capacity=18.0)
        toggles = OperatorToggles(swap33=True)
        config = HgsConfig(seed=seed % 997, granularity=4,
                           operator_toggles=toggles)
        solver = HgsSolver(inst, config)
        tour = rng.permutation(np.arange(1, 9))
        start = solver.individual_from_routes(
            [tour[:4].tolist(), tour[4:].tolist()])
        pen = solver.penalty
        out = local_search(start, inst, config, penalty=pen)
        base = penalized(inst, [r.tolist() for r in out.routes], pen)
        for cand in _kernel_move_candidates(
                inst, [r.tolist() for r in out.routes], 4, toggles):
            assert penalized(inst, cand, pen) >= base - 1e-6


class TestBiasedFitness:
    def _solver_with(self, inst, individuals, config):
        solver = HgsSolver(inst, config)
        for ind in individuals:
            solver.population.append(ind)
        return solver

    def test_identical_population_ranked_by_cost(self):
        inst = line_instance()
        config = HgsConfig(seed=0, population_size=3, diversity_neighbors=1)
        solver = HgsSolver(inst, config)
        ind = solver.individual_from_routes([[1], [2, 3]])
        solver.population = [ind, ind, ind]
        fitness = solver.biased_fitness()
        # all diversity contributions identical -> ordering is cost order
        assert fitness.tolist() == sorted(fitness.tolist())

    def test_cheaper_ranks_first(self):
        inst = line_instance()
        config = HgsConfig(seed=0, population_size=2, diversity_neighbors=1,
                           elite_fraction=0.5)
        solver = HgsSolver(inst, config)
        a = solver.individual_from_routes([[1], [2, 3]])   # cost 8
        b = solver.individual_from_routes([[1, 2], [3]])   # cost 10
        solver.population = [b, a]
        fitness = solver.biased_fitness()
        assert fitness[1] < fitness[0]

    def test_hand_computed_ranks(self):
        rng = np.random.default_rng(3)
        inst = random_instance(rng, 6, capacity=50.0)
        config = HgsConfig(seed=0, population_size=5, diversity_neighbors=2,
                           elite_fraction=0.4)
        solver = HgsSolver(inst, config)
        pop = []
        for _ in range(5):
            tour = rng.permutation(np.arange(1, 7))
            pop.append(solver.individual_from_routes(
                [tour[:3].tolist(), tour[3:].tolist()]))
        solver.population = pop
        fitness = solver.biased_fitness()

        pen = np.array([i.penalized(solver.penalty) for i in pop])
        cost_rank = np.empty(5)
        cost_rank[np.argsort(pen, kind="stable")] = np.arange(5)
        div = []
        for i in range(5):
            ds = sorted(hgs.broken_pairs_distance(pop[i], pop[j], 6)
                        for j in range(5) if j != i)
            div.append(sum(ds[:2]) / 2)
        div_rank = np.empty(5)
        div_rank[np.argsort(-np.array(div), kind="stable")] = np.arange(5)
        want = cost_rank + (1 - 0.4) * div_rank
        assert np.allclose(fitness, want)


class TestRun:
    def test_single_customer(self):
        inst = Instance(name="one", depot=[0, 0], coords=[[3, 4]],
                        demands=[1], capacity=5)
        res = hgs.run(inst, HgsConfig(seed=0), Budget(max_iterations=5))
        assert res.solution.cost == 10.0
        assert len(res.solution.routes) == 1

    def test_determinism(self):
        rng = np.random.default_rng(11)
        inst = random_instance(rng, 15, capacity=25.0)
        cfg = HgsConfig(seed=123)
        r1 = hgs.run(inst, cfg, Budget(max_iterations=120))
        r2 = hgs.run(inst, cfg, Budget(max_iterations=120))
        assert r1.solution == r2.solution
        assert [c for _, c in r1.trace] == [c for _, c in r2.trace]

    def test_small_instance_optimum(self):
        rng = np.random.default_rng(42)
        inst = random_instance(rng, 6, capacity=15.0)
        want, _ = brute_force_optimum(inst)
        res = hgs.run(inst, HgsConfig(seed=7),
                      Budget(max_iterations=400, max_no_improve=200))
        assert res.solution.feasible
        assert res.solution.cost == pytest.approx(want)

    def test_never_reports_false_feasible(self):
        rng = np.random.default_rng(4)
        inst = random_instance(rng, 12, capacity=12.0)
        res = hgs.run(inst, HgsConfig(seed=3), Budget(max_iterations=80))
        cost, feasible, _ = evaluate_solution(
            inst, [r.sequence for r in res.solution.routes])
        assert res.solution.feasible == feasible
        assert res.solution.cost == cost

    def test_trace_monotone(self):
        rng = np.random.default_rng(9)
        inst = random_instance(rng, 12, capacity=20.0)
        res = hgs.run(inst, HgsConfig(seed=5), Budget(max_iterations=100))
        costs = [c for _, c in res.trace]
        assert costs == sorted(costs, reverse=True)


class TestPenaltyAdaptation:
    def test_direction(self):
        inst = line_instance()
        solver = HgsSolver(inst, HgsConfig(seed=0, penalty_adapt_factor=2.0,
                                           target_feasible_ratio=0.5))
        p0 = solver.penalty
        solver._adapt_penalty([False, False, False])
        assert solver.penalty == pytest.approx(p0 * 2.0)
        solver._adapt_penalty([True, True, True])
        assert solver.penalty == pytest.approx(p0)
        solver._adapt_penalty([True, False])
        assert solver.penalty == pytest.approx(p0)


class TestConfigValidation:
    def test_bounds(self):
        assert HgsConfig(population_size=1).violations()
        assert HgsConfig(elite_fraction=0.0).violations()
        assert HgsConfig(penalty_adapt_factor=1.0).violations()
        assert not HgsConfig().violations()
        with pytest.raises(ValueError):
            HgsConfig(population_size=1).validated()

    def test_budget_needs_condition(self):
        with pytest.raises(ValueError):
            Budget()
