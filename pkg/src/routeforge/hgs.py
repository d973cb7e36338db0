"""Hybrid-genetic-search style CVRP solver.

Giant-tour encoding with an optimal O(N^2) split, order crossover,
granular local search over relocate/swap/2-opt/2-opt* neighborhoods, a
diversity-aware biased fitness, and adaptive capacity penalties.
Everything is driven by a single seed; with iteration budgets two runs are
bit-identical. The same solver serves as the global engine and as the
sub-problem solver, differing only in configuration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .cvrp import Instance, Solution, make_solution
from .rng import child_rng, child_seed

_PENALTY_FLOOR = 1e-6
_PENALTY_CEIL = 1e12
_LS_MAX_ROUNDS = 1000


@dataclass(frozen=True)
class OperatorToggles:
    relocate: bool = True
    swap11: bool = True
    swap22: bool = True
    swap33: bool = False   # expensive; worthwhile on small subproblems
    two_opt: bool = True
    two_opt_star: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.relocate, self.swap11, self.swap22,
                         self.swap33, self.two_opt, self.two_opt_star],
                        dtype=np.bool_)

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorToggles":
        return cls(**{k: bool(v) for k, v in d.items()})


@dataclass(frozen=True)
class Budget:
    """Stop conditions; whichever is hit first wins. Iteration-based
    budgets are the determinism anchor; wall-clock is for benchmarking."""

    max_iterations: Optional[int] = None
    max_no_improve: Optional[int] = None
    wall_seconds: Optional[float] = None

    def __post_init__(self):
        if (self.max_iterations is None and self.max_no_improve is None
                and self.wall_seconds is None):
            raise ValueError("budget needs at least one stop condition")


@dataclass(frozen=True)
class HgsConfig:
    population_size: int = 25
    generation_size: int = 40
    elite_fraction: float = 0.4
    granularity: int = 20
    capacity_penalty_init: float = 1.0
    penalty_adapt_factor: float = 1.25
    target_feasible_ratio: float = 0.4
    diversity_neighbors: int = 5
    operator_toggles: OperatorToggles = field(default_factory=OperatorToggles)
    budget: Optional[Budget] = None
    seed: int = 0

    def violations(self) -> List[str]:
        out = []
        if self.population_size < 2:
            out.append("population_size >= 2")
        if self.generation_size < 1:
            out.append("generation_size >= 1")
        if not (0.0 < self.elite_fraction <= 1.0):
            out.append("elite_fraction in (0, 1]")
        if self.elite_fraction * self.population_size < 1.0:
            out.append("elite_fraction * population_size >= 1")
        if self.granularity < 1:
            out.append("granularity >= 1")
        if self.capacity_penalty_init <= 0:
            out.append("capacity_penalty_init > 0")
        if self.penalty_adapt_factor <= 1.0:
            out.append("penalty_adapt_factor > 1")
        if not (0.0 < self.target_feasible_ratio < 1.0):
            out.append("target_feasible_ratio in (0, 1)")
        if self.diversity_neighbors < 1:
            out.append("diversity_neighbors >= 1")
        return out

    def validated(self) -> "HgsConfig":
        bad = self.violations()
        if bad:
            raise ValueError("invalid HgsConfig: " + "; ".join(bad))
        return self

    def to_dict(self) -> dict:
        out = {
            "population_size": self.population_size,
            "generation_size": self.generation_size,
            "elite_fraction": self.elite_fraction,
            "granularity": self.granularity,
            "capacity_penalty_init": self.capacity_penalty_init,
            "penalty_adapt_factor": self.penalty_adapt_factor,
            "target_feasible_ratio": self.target_feasible_ratio,
            "diversity_neighbors": self.diversity_neighbors,
            "operator_toggles": {
                "relocate": self.operator_toggles.relocate,
                "swap11": self.operator_toggles.swap11,
                "swap22": self.operator_toggles.swap22,
                "swap33": self.operator_toggles.swap33,
                "two_opt": self.operator_toggles.two_opt,
                "two_opt_star": self.operator_toggles.two_opt_star,
            },
            "seed": self.seed,
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HgsConfig":
        data = dict(data)
        toggles = data.pop("operator_toggles", None)
        kwargs = {k: data[k] for k in data
                  if k in cls.__dataclass_fields__ and k != "budget"}
        if toggles is not None:
            kwargs["operator_toggles"] = OperatorToggles.from_dict(toggles)
        return cls(**kwargs)


@dataclass(eq=False)
class Individual:
    tour: np.ndarray                 # int32 permutation of 1..N
    routes: List[np.ndarray]
    cost: float                      # true distance cost
    excess: float                    # summed capacity excess over routes
    penalized_cost: float            # cost + penalty*excess at creation
    feasible: bool
    _pairs: Optional[np.ndarray] = None   # encoded tour adjacencies

    def penalized(self, penalty: float) -> float:
        return self.cost + penalty * self.excess

    def adjacency_pairs(self, n: int) -> np.ndarray:
        if self._pairs is None:
            t = self.tour
            if t.shape[0] < 2:
                self._pairs = np.empty(0, dtype=np.int64)
            else:
                a = np.minimum(t[:-1], t[1:]).astype(np.int64)
                b = np.maximum(t[:-1], t[1:]).astype(np.int64)
                self._pairs = np.sort(a * (n + 1) + b)
        return self._pairs


def broken_pairs_distance(a: Individual, b: Individual, n: int) -> float:
    """Fraction of giant-tour adjacencies of a that b does not share."""
    if n < 2:
        return 0.0
    pa = a.adjacency_pairs(n)
    pb = b.adjacency_pairs(n)
    shared = np.intersect1d(pa, pb, assume_unique=False).size
    return (pa.size - shared) / float(n - 1)


def granular_neighbors(instance: Instance, gamma: int) -> np.ndarray:
    """(N+1, G) nearest other customers per customer; row 0 unused.
    Ties break toward the lower customer id; empty slots hold 0."""
    n = instance.n_customers
    g = max(0, min(gamma, n - 1))
    out = np.zeros((n + 1, g), dtype=np.int32)
    if g == 0:
        return out
    d = instance.distance_matrix()[1:, 1:]
    order = np.argsort(d, axis=1, kind="stable")
    for i in range(n):
        row = order[i]
        row = row[row != i][:g]
        out[i + 1, :row.size] = row + 1
    return out


def split(giant_tour: Sequence[int], instance: Instance,
          penalty: float) -> List[np.ndarray]:
    """Optimal contiguous segmentation of the tour under penalized cost."""
    tour = np.asarray(giant_tour, dtype=np.int32)
    n = tour.shape[0]
    if n == 0:
        return []
    if np.sort(tour).tolist() != list(range(1, instance.n_customers + 1)):
        raise ValueError("giant tour must be a permutation of 1..N")
    pred = np.empty(n + 1, dtype=np.int32)
    value = np.empty(n + 1, dtype=np.float64)
    kernels.split_dp(tour, instance.distance_matrix(),
                     instance.node_demands(), float(instance.capacity),
                     float(penalty), pred, value)
    routes: List[np.ndarray] = []
    j = n
    while j > 0:
        i = int(pred[j])
        routes.append(tour[i:j].copy())
        j = i
    routes.reverse()
    return routes


def ox_crossover(parent_a: Sequence[int], parent_b: Sequence[int],
                 rng: np.random.Generator) -> np.ndarray:
    """Order crossover: keep a slice of parent_a, fill with parent_b order."""
    a = np.asarray(parent_a, dtype=np.int32)
    b = np.asarray(parent_b, dtype=np.int32)
    if sorted(a.tolist()) != sorted(b.tolist()):
        raise ValueError("parents must be permutations of the same id set")
    n = a.shape[0]
    if n == 1:
        return a.copy()
    i, j = np.sort(rng.integers(0, n, size=2))
    child = np.full(n, -1, dtype=np.int32)
    child[i:j + 1] = a[i:j + 1]
    kept = set(a[i:j + 1].tolist())
    fill = [c for c in b.tolist() if c not in kept]
    pos = (j + 1) % n
    for c in fill:
        child[pos] = c
        pos = (pos + 1) % n
    return child


class _LsBuffers:
    """Preallocated route-state arrays reused across local-search calls."""

    def __init__(self, n: int):
        self.n = n
        rmax = n + 1
        width = max(n, 1)
        self.routes = np.zeros((rmax, width), dtype=np.int32)
        self.rlen = np.zeros(rmax, dtype=np.int32)
        self.cum = np.zeros((rmax, width + 1), dtype=np.float64)
        self.loads = np.zeros(rmax, dtype=np.float64)
        self.route_of = np.zeros(n + 1, dtype=np.int32)
        self.pos_of = np.zeros(n + 1, dtype=np.int32)
        self.scratch = np.zeros(width, dtype=np.int32)

    def load(self, routes: Sequence[Sequence[int]],
             demand: np.ndarray) -> int:
        self.rlen[:] = 0
        self.loads[:] = 0.0
        n_routes = 0
        for seq in routes:
            if len(seq) == 0:
                continue
            r = n_routes
            total = 0.0
            self.cum[r, 0] = 0.0
            for k, c in enumerate(seq):
                c = int(c)
                self.routes[r, k] = c
                self.route_of[c] = r
                self.pos_of[c] = k
                total += demand[c]
                self.cum[r, k + 1] = total
            self.rlen[r] = len(seq)
            self.loads[r] = total
            n_routes += 1
        return n_routes

    def extract(self, n_routes: int) -> List[np.ndarray]:
        out = []
        for r in range(n_routes):
            if self.rlen[r] > 0:
                out.append(self.routes[r, :self.rlen[r]].copy())
        return out


def _routes_cost_excess(routes: Sequence[np.ndarray], dist: np.ndarray,
                        demand: np.ndarray,
                        capacity: float) -> Tuple[float, float]:
    cost = 0.0
    excess = 0.0
    for seq in routes:
        cost += dist[0, seq[0]] + dist[seq[-1], 0]
        if seq.shape[0] > 1:
            cost += dist[seq[:-1], seq[1:]].sum()
        load = demand[seq].sum()
        if load > capacity:
            excess += load - capacity
    return float(cost), float(excess)


class HgsSolver:
    """Resumable solver instance: seeded population plus evolution steps."""

    def __init__(self, instance: Instance, config: HgsConfig):
        config.validated()
        self.instance = instance
        self.config = config
        self.n = instance.n_customers
        self.dist = instance.distance_matrix()
        self.demand = instance.node_demands()
        self.capacity = float(instance.capacity)
        self.gamma = max(1, min(config.granularity, max(self.n - 1, 1)))
        self.neighbors = granular_neighbors(instance, self.gamma)
        self.toggles = config.operator_toggles.as_array()
        self.rng = child_rng(config.seed, "hgs", instance.name)
        self._buffers = _LsBuffers(self.n)
        nonzero = self.dist[self.dist > 0]
        pos_demand = self.demand[self.demand > 0]
        demand_scale = pos_demand.mean() if pos_demand.size else 1.0
        scale = (nonzero.mean() / demand_scale) if nonzero.size else 1.0
        self.penalty = max(_PENALTY_FLOOR,
                           config.capacity_penalty_init * max(scale, 1e-9))
        self.population: List[Individual] = []
        self.best: Optional[Individual] = None          # best feasible
        self.best_penalized: Optional[Individual] = None
        self.iterations = 0
        self.stale_iterations = 0
        self.trace: List[Tuple[float, float]] = []
        self._t0 = time.perf_counter()
        self._fitness_cache: Optional[np.ndarray] = None

    # -- individual construction ------------------------------------------

    def _improve(self, routes: Sequence[np.ndarray]) -> Individual:
        """Run the local-search kernel over the given routes."""
        n_routes = self._buffers.load(routes, self.demand)
        order = self.rng.permutation(np.arange(1, self.n + 1)).astype(np.int32)
        n_routes = int(kernels.ls_run(
            self._buffers.routes, self._buffers.rlen, self._buffers.cum,
            self._buffers.loads, self._buffers.route_of, self._buffers.pos_of,
            n_routes, self.dist, self.demand, self.capacity,
            float(self.penalty), self.neighbors, self.toggles, order,
            self._buffers.scratch, _LS_MAX_ROUNDS))
        out_routes = self._buffers.extract(n_routes)
        cost, excess = _routes_cost_excess(out_routes, self.dist,
                                           self.demand, self.capacity)
        return Individual(tour=np.concatenate(out_routes).astype(np.int32),
                          routes=out_routes, cost=cost, excess=excess,
                          penalized_cost=cost + self.penalty * excess,
                          feasible=excess <= 1e-9)

    def _educate(self, tour: np.ndarray) -> Individual:
        return self._improve(split(tour, self.instance, self.penalty))

    def individual_from_routes(self, routes: Sequence[Sequence[int]]
                               ) -> Individual:
        arrs = [np.asarray(seq, dtype=np.int32) for seq in routes
                if len(seq)]
        cost, excess = _routes_cost_excess(arrs, self.dist, self.demand,
                                           self.capacity)
        tour = np.concatenate(arrs).astype(np.int32)
        return Individual(tour=tour, routes=arrs, cost=cost, excess=excess,
                          penalized_cost=cost + self.penalty * excess,
                          feasible=excess <= 1e-9)

    # -- population management --------------------------------------------

    def _register(self, ind: Individual):
        self.population.append(ind)
        self._fitness_cache = None
        improved = False
        if ind.feasible and (self.best is None or ind.cost < self.best.cost):
            self.best = ind
            improved = True
        if (self.best_penalized is None
                or ind.penalized(self.penalty)
                < self.best_penalized.penalized(self.penalty)):
            self.best_penalized = ind
        if improved:
            self.trace.append((time.perf_counter() - self._t0, ind.cost))
            self.stale_iterations = 0

    def initialize(self):
        if self.population:
            return
        for _ in range(self.config.population_size):
            tour = self.rng.permutation(
                np.arange(1, self.n + 1)).astype(np.int32)
            self._register(self._educate(tour))

    def biased_fitness(self) -> np.ndarray:
        """Lower is better: cost rank + (1 - elite_fraction) * diversity rank."""
        if self._fitness_cache is not None:
            return self._fitness_cache
        pop = self.population
        m = len(pop)
        pen = np.array([ind.penalized(self.penalty) for ind in pop])
        cost_rank = np.empty(m, dtype=np.float64)
        cost_rank[np.argsort(pen, kind="stable")] = np.arange(m)
        if m > 1:
            k = min(self.config.diversity_neighbors, m - 1)
            div = np.empty(m, dtype=np.float64)
            bpd = np.zeros((m, m))
            for i in range(m):
                for j in range(i + 1, m):
                    bpd[i, j] = bpd[j, i] = broken_pairs_distance(
                        pop[i], pop[j], self.n)
            for i in range(m):
                others = np.delete(bpd[i], i)
                closest = np.sort(others)[:k]
                div[i] = closest.mean()
            div_rank = np.empty(m, dtype=np.float64)
            div_rank[np.argsort(-div, kind="stable")] = np.arange(m)
        else:
            div_rank = np.zeros(m)
        weight = max(0.0, 1.0 - self.config.elite_fraction)
        self._fitness_cache = cost_rank + weight * div_rank
        return self._fitness_cache

    def _tournament(self, fitness: np.ndarray) -> Individual:
        # fitness is the generation-start snapshot; offspring appended since
        # then only become candidates next generation
        i, j = self.rng.integers(0, fitness.shape[0], size=2)
        return self.population[i if fitness[i] <= fitness[j] else j]

    def _survivor_selection(self):
        mu = self.config.population_size
        if len(self.population) <= mu:
            return
        pop = self.population
        n_elite = max(1, int(np.ceil(self.config.elite_fraction * mu)))
        feas = [i for i, ind in enumerate(pop) if ind.feasible]
        feas.sort(key=lambda i: (pop[i].cost, i))
        protected = set(feas[:n_elite])
        self._fitness_cache = None
        fitness = self.biased_fitness()
        order = sorted(range(len(pop)), key=lambda i: (-fitness[i], -i))
        doomed = []
        for i in order:
            if len(pop) - len(doomed) <= mu:
                break
            if i in protected:
                continue
            doomed.append(i)
        keep = sorted(set(range(len(pop))) - set(doomed))
        self.population = [pop[i] for i in keep]
        self._fitness_cache = None

    def _adapt_penalty(self, feasible_flags: List[bool]):
        if not feasible_flags:
            return
        frac = sum(feasible_flags) / len(feasible_flags)
        target = self.config.target_feasible_ratio
        if frac < target:
            self.penalty *= self.config.penalty_adapt_factor
        elif frac > target:
            self.penalty /= self.config.penalty_adapt_factor
        self.penalty = min(max(self.penalty, _PENALTY_FLOOR), _PENALTY_CEIL)

    # -- evolution ----------------------------------------------------------

    def step(self, budget: Budget):
        """Evolve until the budget is exhausted (counted from this call)."""
        self.initialize()
        start_iter = self.iterations
        t_start = time.perf_counter()
        self.stale_iterations = 0
        while True:
            if (budget.max_iterations is not None
                    and self.iterations - start_iter >= budget.max_iterations):
                break
            if (budget.max_no_improve is not None
                    and self.stale_iterations >= budget.max_no_improve):
                break
            if (budget.wall_seconds is not None
                    and time.perf_counter() - t_start >= budget.wall_seconds):
                break
            fitness = self.biased_fitness()
            feasible_flags = []
            for _ in range(self.config.generation_size):
                if (budget.max_iterations is not None
                        and self.iterations - start_iter
                        >= budget.max_iterations):
                    break
                if (budget.wall_seconds is not None
                        and time.perf_counter() - t_start
                        >= budget.wall_seconds):
                    break
                pa = self._tournament(fitness)
                pb = self._tournament(fitness)
                child_tour = ox_crossover(pa.tour, pb.tour, self.rng)
                child = self._educate(child_tour)
                self.iterations += 1
                self.stale_iterations += 1
                feasible_flags.append(child.feasible)
                self._register(child)
            self._adapt_penalty(feasible_flags)
            self._survivor_selection()

    def best_solution(self) -> Solution:
        ind = self.best if self.best is not None else self.best_penalized
        if ind is None:
            raise RuntimeError("solver has not run")
        return make_solution(self.instance, [r.tolist() for r in ind.routes])


@dataclass
class RunResult:
    solution: Solution
    trace: List[Tuple[float, float]]
    iterations: int
    wall_seconds: float
    found_feasible: bool


def local_search(individual: Individual, instance: Instance,
                 config: HgsConfig, penalty: Optional[float] = None,
                 rng: Optional[np.random.Generator] = None) -> Individual:
    """Granular local search to a local optimum; penalized cost never rises."""
    solver = HgsSolver(instance, config)
    if penalty is not None:
        solver.penalty = penalty
    if rng is not None:
        solver.rng = rng
    return solver._improve(individual.routes)


def run(instance: Instance, config: HgsConfig,
        budget: Optional[Budget] = None) -> RunResult:
    """Full HGS run; returns best feasible solution (or best penalized,
    flagged via Solution.feasible) plus the convergence trace."""
    budget = budget or config.budget
    if budget is None:
        raise ValueError("no budget given")
    solver = HgsSolver(instance, config)
    t0 = time.perf_counter()
    solver.step(budget)
    wall = time.perf_counter() - t0
    return RunResult(solution=solver.best_solution(),
                     trace=list(solver.trace),
                     iterations=solver.iterations,
                     wall_seconds=wall,
                     found_feasible=solver.best is not None)


def default_config(seed: int = 0, **overrides) -> HgsConfig:
    return replace(HgsConfig(seed=seed), **overrides)
