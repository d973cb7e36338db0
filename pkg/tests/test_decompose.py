import numpy as np
import pytest

from helpers import random_instance
from routeforge.cvrp import Instance, make_solution
from routeforge.decompose import (
    STRATEGY_IDS,
    DecompositionParams,
    decompose,
    make_subproblem,
    resolve_cluster_count,
    route_barycenter,
    strategy_catalog,
    validate_partition,
)
from routeforge.synth import generate_instance


def two_cloud_instance():
    rng = np.random.default_rng(0)
    left = rng.uniform(0, 10, size=(5, 2))
    right = rng.uniform(90, 100, size=(5, 2))
    return Instance(name="clouds", depot=[50, 50],
                    coords=np.vstack([left, right]),
                    demands=np.ones(10), capacity=20)


def elite_for(instance, routes):
    return make_solution(instance, routes)


class TestRouteBarycenter:
    def test_midpoint(self):
        inst = Instance(name="m", depot=[9, 9], coords=[[0, 0], [2, 2]],
                        demands=[1, 1], capacity=5)
        assert route_barycenter([1, 2], inst).tolist() == [1.0, 1.0]

    def test_single(self):
        inst = Instance(name="s", depot=[0, 0], coords=[[5, 7]],
                        demands=[1], capacity=5)
        assert route_barycenter([1], inst).tolist() == [5.0, 7.0]

    def test_three_points(self):
        inst = Instance(name="t", depot=[0, 0],
                        coords=[[0, 0], [3, 0], [0, 3]],
                        demands=[1, 1, 1], capacity=5)
        assert route_barycenter([1, 2, 3], inst).tolist() == [1.0, 1.0]

    def test_empty_route(self):
        inst = Instance(name="e", depot=[0, 0], coords=[[1, 1]],
                        demands=[1], capacity=5)
        with pytest.raises(ValueError):
            route_barycenter([], inst)


class TestValidatePartition:
    def test_valid(self):
        inst = random_instance(np.random.default_rng(1), 5, capacity=50)
        subs = [make_subproblem(inst, [1, 2]), make_subproblem(inst, [3, 4, 5])]
        assert validate_partition(inst, subs) == []

    def test_duplicate(self):
        inst = random_instance(np.random.default_rng(1), 5, capacity=50)
        subs = [make_subproblem(inst, [1, 2]),
                make_subproblem(inst, [2, 3, 4, 5])]
        assert any("duplicate id 2" in v for v in validate_partition(inst, subs))

    def test_missing(self):
        inst = random_instance(np.random.default_rng(1), 5, capacity=50)
        subs = [make_subproblem(inst, [1, 2]), make_subproblem(inst, [4, 5])]
        assert any("missing id 3" in v for v in validate_partition(inst, subs))


class TestDecompose:
    def test_two_clouds_kmeans(self):
        inst = two_cloud_instance()
        subs = decompose(inst, None, DecompositionParams(
            strategy_id="customer-kmeans", cluster_count=2, seed=3))
        sets = sorted(tuple(s.customer_ids) for s in subs)
        assert sets == [(1, 2, 3, 4, 5), (6, 7, 8, 9, 10)]

    @pytest.mark.parametrize("sid", STRATEGY_IDS)
    def test_k1_single_subproblem(self, sid):
        inst = two_cloud_instance()
        elite = elite_for(inst, [[1, 2, 3], [4, 5], [6, 7], [8, 9, 10]])
        subs = decompose(inst, elite, DecompositionParams(
            strategy_id=sid, cluster_count=1, seed=0))
        assert len(subs) == 1
        assert subs[0].customer_ids == tuple(range(1, 11))

    def test_route_atomicity(self):
        inst = two_cloud_instance()
        routes = [[1, 2], [3, 4, 5], [6, 7], [8, 9, 10]]
        elite = elite_for(inst, routes)
        subs = decompose(inst, elite, DecompositionParams(
            strategy_id="route-barycenter-kmeans", cluster_count=2, seed=1))
        groups = [set(s.customer_ids) for s in subs]
        for r in routes:
            assert sum(set(r) <= g for g in groups) == 1

    def test_elite_required(self):
        inst = two_cloud_instance()
        with pytest.raises(ValueError, match="requires an elite"):
            decompose(inst, None, DecompositionParams(
                strategy_id="route-barycenter-kmeans", cluster_count=2))

    def test_k_too_large(self):
        inst = two_cloud_instance()
        with pytest.raises(ValueError, match="cluster_count"):
            decompose(inst, None, DecompositionParams(
                strategy_id="customer-kmeans", cluster_count=11))

    def test_seed_determinism(self):
        inst = generate_instance(60, layout="clustered", seed=5)
        for sid in STRATEGY_IDS:
            elite = elite_for(inst, [[c] for c in range(1, 61)])
            params = DecompositionParams(strategy_id=sid, target_size=15,
                                         seed=11)
            a = decompose(inst, elite, params)
            b = decompose(inst, elite, params)
            assert [s.customer_ids for s in a] == [s.customer_ids for s in b]

    @pytest.mark.parametrize("sid", [s for s in STRATEGY_IDS
                                     if s not in ("route-barycenter-kmeans",
                                                  "elite-route-grouping")])
    def test_size_control(self, sid):
        inst = generate_instance(120, layout="mixed", seed=2)
        m = 20
        subs = decompose(inst, None, DecompositionParams(
            strategy_id=sid, target_size=m, seed=4))
        sizes = [len(s.customer_ids) for s in subs]
        small = [s for s in sizes if s < -(-m // 2)]
        assert all(s <= 2 * m for s in sizes)
        assert len(small) <= 1

    def test_coincident_points_ok(self):
        coords = np.ones((12, 2)) * 5.0
        inst = Instance(name="dup", depot=[0, 0], coords=coords,
                        demands=np.ones(12), capacity=5)
        for sid in STRATEGY_IDS:
            if sid in ("route-barycenter-kmeans", "elite-route-grouping"):
                continue
            subs = decompose(inst, None, DecompositionParams(
                strategy_id=sid, cluster_count=3, seed=9))
            assert validate_partition(inst, subs) == []

    def test_local_instances_inherit(self):
        inst = two_cloud_instance()
        sub = decompose(inst, None, DecompositionParams(
            strategy_id="kd-median", cluster_count=2, seed=0))[0]
        assert sub.local_instance.capacity == inst.capacity
        assert sub.local_instance.rounding_mode == inst.rounding_mode
        global_routes = sub.to_global([[1, 2]])
        assert global_routes[0] == [sub.id_map[1], sub.id_map[2]]


class TestParams:
    def test_exactly_one_of_m_k(self):
        assert DecompositionParams("customer-kmeans").violations()
        assert DecompositionParams("customer-kmeans", target_size=10,
                                   cluster_count=2).violations()
        assert not DecompositionParams("customer-kmeans",
                                       target_size=10).violations()

    def test_unknown_strategy(self):
        assert DecompositionParams("nope", target_size=10).violations()

    def test_param_bounds(self):
        bad = DecompositionParams("density-grouping", target_size=10,
                                  strategy_specific={"radius_scale": 9.0})
        assert bad.violations()

    def test_resolve_k(self):
        p = DecompositionParams("customer-kmeans", target_size=30)
        assert resolve_cluster_count(p, 100) == 4
        p2 = DecompositionParams("customer-kmeans", cluster_count=7)
        assert resolve_cluster_count(p2, 100) == 7
        assert resolve_cluster_count(p, 10) == 1

    def test_catalog_machine_readable(self):
        cat = strategy_catalog()
        assert len(cat) == 11
        for entry in cat:
            assert {"id", "requires_elite", "params", "example"} <= set(entry)
            example = DecompositionParams(
                strategy_id=entry["example"]["strategy_id"],
                target_size=entry["example"]["target_size"],
                strategy_specific=entry["example"]["strategy_specific"])
            assert example.violations() == []
