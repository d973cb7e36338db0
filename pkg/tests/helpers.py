"""Shared independent oracles for the test suite.

These deliberately avoid the library's own search/kernel code paths:
brute force, enumeration, and plain-Python recomputation only.
"""

from __future__ import annotations

import itertools
import math
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np

from routeforge.cvrp import Instance


def leg_sum_cost(instance: Instance, routes: Sequence[Sequence[int]]) -> float:
    """Independent leg-by-leg summation using scalar distance lookups."""
    total = 0.0
    for seq in routes:
        prev = 0
        for c in seq:
            total += instance.distance(prev, c)
            prev = c
        total += instance.distance(prev, 0)
    return total


def routes_excess(instance: Instance, routes: Sequence[Sequence[int]]) -> float:
    demands = instance.node_demands()
    excess = 0.0
    for seq in routes:
        load = sum(demands[c] for c in seq)
        excess += max(0.0, load - instance.capacity)
    return excess


def penalized(instance: Instance, routes: Sequence[Sequence[int]],
              penalty: float) -> float:
    return leg_sum_cost(instance, routes) + penalty * routes_excess(instance, routes)


def best_route_order(instance: Instance,
                     subset: FrozenSet[int],
                     cache: Dict[FrozenSet[int], Tuple[float, Tuple[int, ...]]],
                     ) -> Tuple[float, Tuple[int, ...]]:
    """Cheapest depot-to-depot ordering of a customer subset (permutations)."""
    if subset in cache:
        return cache[subset]
    best = (math.inf, ())
    for perm in itertools.permutations(sorted(subset)):
        cost = leg_sum_cost(instance, [perm])
        if cost < best[0]:
            best = (cost, perm)
    cache[subset] = best
    return best


def _set_partitions(items: List[int]):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def brute_force_optimum(instance: Instance) -> Tuple[float, List[Tuple[int, ...]]]:
    """Exact CVRP optimum by exhausting route partitions + orderings."""
    n = instance.n_customers
    demands = instance.node_demands()
    cache: Dict[FrozenSet[int], Tuple[float, Tuple[int, ...]]] = {}
    best_cost = math.inf
    best_routes: List[Tuple[int, ...]] = []
    for partition in _set_partitions(list(range(1, n + 1))):
        if any(sum(demands[c] for c in block) > instance.capacity
               for block in partition):
            continue
        cost = 0.0
        routes = []
        for block in partition:
            c, order = best_route_order(instance, frozenset(block), cache)
            cost += c
            routes.append(order)
            if cost >= best_cost:
                break
        if cost < best_cost:
            best_cost = cost
            best_routes = routes
    return best_cost, best_routes


def split_enumeration_optimum(instance: Instance, tour: Sequence[int],
                              penalty: float) -> float:
    """Minimum penalized cost over all contiguous segmentations of the tour."""
    tour = list(tour)
    n = len(tour)
    best = math.inf
    for cuts in itertools.product([0, 1], repeat=n - 1):
        routes = []
        cur = [tour[0]]
        for k, cut in enumerate(cuts):
            if cut:
                routes.append(cur)
                cur = []
            cur.append(tour[k + 1])
        routes.append(cur)
        best = min(best, penalized(instance, routes, penalty))
    return best


def random_instance(rng: np.random.Generator, n: int,
                    capacity: float = 30.0) -> Instance:
    coords = np.floor(rng.uniform(0, 100, size=(n, 2)))
    demands = rng.integers(1, 10, size=n).astype(float)
    depot = np.floor(rng.uniform(0, 100, size=2))
    return Instance(name=f"rand{n}", depot=depot, coords=coords,
                    demands=demands, capacity=capacity)
