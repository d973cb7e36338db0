"""Three-tier solver descriptors, assembly, and the decomposed solving loop.

Tier 1 fixes the overall framework (subproblem granularity, decomposition
trigger period, elite selection, reintegration, budget split, global-phase
overrides), tier 2 picks the decomposition strategy, tier 3 configures the
sub-solver. An assembly of all three is a fully executable solver whose
canonical text (key-sorted, value-normalized, rationale included) feeds
the similarity machinery and the checkpoint format.

Tier 1 owns decomposition granularity: when the tier-2 parameters carry a
target size it is replaced by tier 1's at run time; an explicit tier-2
cluster_count is honored (clamped to N).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cvrp import Instance, Solution, make_solution
from .decompose import (
    STRATEGY_IDS,
    DecompositionParams,
    SubProblem,
    decompose,
    validate_partition,
)
from .hgs import Budget, HgsConfig, HgsSolver, Individual
from .rng import child_seed

SCHEMA_VERSION = 1

ELITE_RULES = ("best-feasible", "best-penalized", "tournament-of-top-p")
REINTEGRATION_RULES = ("replace-if-route-set-improves", "always-replace",
                       "population-insert")

# soft sampling ranges for generated descriptors (hard bounds live in the
# validators); these also document the schema in generator prompts
TIER1_RANGES = {
    "target_subproblem_size": (10, 300),
    "decomposition_trigger_period": (5, 200),
    "budget_split": (0.2, 0.8),
}
TIER3_RANGES = {
    "population_size": (8, 40),
    "generation_size": (10, 60),
    "elite_fraction": (0.2, 0.6),
    "granularity": (5, 25),
    "capacity_penalty_init": (0.5, 2.0),
    "penalty_adapt_factor": (1.1, 1.6),
    "target_feasible_ratio": (0.2, 0.7),
    "diversity_neighbors": (2, 8),
    "budget_per_subproblem": (50, 600),
}


@dataclass(frozen=True)
class FrameworkDescriptor:
    target_subproblem_size: int = 100
    decomposition_trigger_period: int = 40
    elite_selection_rule: str = "best-feasible"
    reintegration_rule: str = "replace-if-route-set-improves"
    budget_split: float = 0.5            # share of cycle wall time for the
                                         # global phase (wall budgets only)
    global_overrides: Dict[str, object] = field(default_factory=dict)
    rationale: str = ""

    def violations(self) -> List[str]:
        out = []
        if self.target_subproblem_size < 2:
            out.append("target_subproblem_size >= 2")
        if self.decomposition_trigger_period < 1:
            out.append("decomposition_trigger_period >= 1")
        if self.elite_selection_rule not in ELITE_RULES:
            out.append(f"elite_selection_rule in {ELITE_RULES}")
        if self.reintegration_rule not in REINTEGRATION_RULES:
            out.append(f"reintegration_rule in {REINTEGRATION_RULES}")
        if not (0.0 < self.budget_split < 1.0):
            out.append("budget_split in (0, 1)")
        allowed = set(HgsConfig.__dataclass_fields__) - {"budget", "seed"}
        for key in self.global_overrides:
            if key not in allowed:
                out.append(f"unknown global override {key!r}")
        return out

    def to_dict(self) -> dict:
        return {"target_subproblem_size": self.target_subproblem_size,
                "decomposition_trigger_period":
                    self.decomposition_trigger_period,
                "elite_selection_rule": self.elite_selection_rule,
                "reintegration_rule": self.reintegration_rule,
                "budget_split": self.budget_split,
                "global_overrides": dict(self.global_overrides),
                "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: dict) -> "FrameworkDescriptor":
        kwargs = {k: data[k] for k in data if k in cls.__dataclass_fields__}
        return cls(**kwargs)


@dataclass(frozen=True)
class DecompositionDescriptor:
    params: DecompositionParams = field(
        default_factory=lambda: DecompositionParams(
            strategy_id="route-barycenter-kmeans", target_size=100))
    rationale: str = ""

    def violations(self) -> List[str]:
        return self.params.violations()

    def to_dict(self) -> dict:
        return {"strategy_id": self.params.strategy_id,
                "target_size": self.params.target_size,
                "cluster_count": self.params.cluster_count,
                "strategy_specific": dict(self.params.strategy_specific),
                "seed": self.params.seed,
                "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: dict) -> "DecompositionDescriptor":
        params = DecompositionParams(
            strategy_id=data.get("strategy_id", ""),
            target_size=data.get("target_size"),
            cluster_count=data.get("cluster_count"),
            strategy_specific=dict(data.get("strategy_specific", {})),
            seed=int(data.get("seed", 0)))
        return cls(params=params, rationale=data.get("rationale", ""))


@dataclass(frozen=True)
class SubSolverDescriptor:
    config: HgsConfig = field(default_factory=HgsConfig)
    budget_per_subproblem: int = 200      # evolution iterations per solve
    rationale: str = ""

    def violations(self) -> List[str]:
        out = list(self.config.violations())
        if self.budget_per_subproblem < 1:
            out.append("budget_per_subproblem >= 1")
        return out

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "budget_per_subproblem": self.budget_per_subproblem,
                "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: dict) -> "SubSolverDescriptor":
        return cls(config=HgsConfig.from_dict(data.get("config", {})),
                   budget_per_subproblem=int(
                       data.get("budget_per_subproblem", 200)),
                   rationale=data.get("rationale", ""))


_TIER_TYPES = {1: FrameworkDescriptor, 2: DecompositionDescriptor,
               3: SubSolverDescriptor}


def validate_descriptor(tier: int, descriptor) -> List[str]:
    """Empty list iff the descriptor is well-formed for its tier."""
    expected = _TIER_TYPES.get(tier)
    if expected is None:
        return [f"unknown tier {tier}"]
    if not isinstance(descriptor, expected):
        return [f"tier {tier} expects {expected.__name__}, "
                f"got {type(descriptor).__name__}"]
    return descriptor.violations()


def descriptor_from_dict(tier: int, data: dict):
    return _TIER_TYPES[tier].from_dict(data)


# ---------------------------------------------------------------------------
# canonical text
# ---------------------------------------------------------------------------

def _norm_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if float(value).is_integer():
            return str(int(value))
        return repr(float(value))
    return str(value)


# compact canonical field names: shared schema boilerplate would otherwise
# dominate the token mass the similarity transport moves
_CANONICAL_NAMES = {
    "target_subproblem_size": "block",
    "decomposition_trigger_period": "period",
    "elite_selection_rule": "elite_rule",
    "reintegration_rule": "reintegration",
    "budget_split": "split",
    "strategy_id": "strategy",
    "target_size": "block",
    "cluster_count": "clusters",
    "population_size": "pop",
    "generation_size": "offspring",
    "elite_fraction": "elite",
    "granularity": "reach",
    "capacity_penalty_init": "penalty",
    "penalty_adapt_factor": "adapt",
    "target_feasible_ratio": "feasible",
    "diversity_neighbors": "spread",
    "budget_per_subproblem": "iters",
}


def _flatten(data: dict, skip=("rationale", "seed")) -> List[tuple]:
    """Leaf (key, value) pairs, key-sorted at every level. Operator toggle
    blocks collapse to the list of enabled operators so the token stream
    carries signal rather than six true/false markers."""
    lines = []
    for key in sorted(data):
        if key in skip:
            continue
        value = data[key]
        if value is None:
            continue
        if key == "operator_toggles":
            enabled = [name for name in sorted(value) if value[name]]
            lines.append(("operators", "+".join(enabled) or "none"))
        elif isinstance(value, dict):
            lines.extend(_flatten(value, skip))
        else:
            lines.append((_CANONICAL_NAMES.get(key, key),
                          _norm_value(value)))
    return lines


def descriptor_canonical_text(tier: int, descriptor) -> str:
    """Key-sorted, value-normalized text plus the generator's rationale.
    Seeds are excluded (two candidates differing only in rng seed are the
    same component) and nested keys flatten to their leaf names."""
    pairs = _flatten(descriptor.to_dict())
    lines = [f"tier={tier}"]
    lines.extend(f"{key}={value}" for key, value in sorted(pairs))
    rationale = getattr(descriptor, "rationale", "") or ""
    lines.append(f"rationale={rationale}")
    return "\n".join(lines)


@dataclass(frozen=True)
class SolverAssembly:
    tier1: FrameworkDescriptor
    tier2: DecompositionDescriptor
    tier3: SubSolverDescriptor

    @property
    def canonical_text(self) -> str:
        return "\n".join([
            descriptor_canonical_text(1, self.tier1),
            descriptor_canonical_text(2, self.tier2),
            descriptor_canonical_text(3, self.tier3),
        ])

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION,
                "tier1": self.tier1.to_dict(),
                "tier2": self.tier2.to_dict(),
                "tier3": self.tier3.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "SolverAssembly":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"checkpoint schema {version!r} does not match "
                             f"expected {SCHEMA_VERSION}")
        return cls(tier1=FrameworkDescriptor.from_dict(data["tier1"]),
                   tier2=DecompositionDescriptor.from_dict(data["tier2"]),
                   tier3=SubSolverDescriptor.from_dict(data["tier3"]))

    @classmethod
    def from_json(cls, text: str) -> "SolverAssembly":
        return cls.from_dict(json.loads(text))


def assemble(tier1: FrameworkDescriptor, tier2: DecompositionDescriptor,
             tier3: SubSolverDescriptor) -> SolverAssembly:
    problems = (validate_descriptor(1, tier1) + validate_descriptor(2, tier2)
                + validate_descriptor(3, tier3))
    if problems:
        raise ValueError("invalid assembly: " + "; ".join(problems))
    return SolverAssembly(tier1=tier1, tier2=tier2, tier3=tier3)


def default_assembly(strategy_id: str = "route-barycenter-kmeans",
                     ) -> SolverAssembly:
    return assemble(
        FrameworkDescriptor(),
        DecompositionDescriptor(params=DecompositionParams(
            strategy_id=strategy_id, target_size=100)),
        SubSolverDescriptor())


# ---------------------------------------------------------------------------
# running an assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssemblyBudget:
    """Either wall-clock seconds or an exact cycle count (determinism)."""
    wall_seconds: Optional[float] = None
    cycles: Optional[int] = None
    max_global_iters: Optional[int] = None    # per-cycle cap on F
    max_sub_iters: Optional[int] = None       # cap on tier-3 budget

    def __post_init__(self):
        if (self.wall_seconds is None) == (self.cycles is None):
            raise ValueError("exactly one of wall_seconds / cycles")


@dataclass
class DecompositionEvent:
    cycle: int
    n_subproblems: int
    partition_ok: bool
    aligned: bool


@dataclass
class AssemblyRunResult:
    solution: Solution
    trace: List[Tuple[float, float]]
    cycles: int
    events: List[DecompositionEvent]
    wall_seconds: float


def _select_elite(solver: HgsSolver, rule: str,
                  rng: np.random.Generator) -> Optional[Individual]:
    pop = solver.population
    if not pop:
        return None
    if rule == "best-feasible":
        feas = [ind for ind in pop if ind.feasible]
        if feas:
            return min(feas, key=lambda i: i.cost)
        return min(pop, key=lambda i: i.penalized(solver.penalty))
    if rule == "best-penalized":
        return min(pop, key=lambda i: i.penalized(solver.penalty))
    # tournament-of-top-p: seeded draw from the best quartile
    ranked = sorted(pop, key=lambda i: i.penalized(solver.penalty))
    top = ranked[:max(1, math.ceil(0.25 * len(ranked)))]
    return top[int(rng.integers(0, len(top)))]


def _elite_solution(solver: HgsSolver, elite: Individual) -> Solution:
    return make_solution(solver.instance, [r.tolist() for r in elite.routes])


def _restricted_tour(elite: Individual, ids: Sequence[int]) -> List[int]:
    members = set(int(c) for c in ids)
    return [int(c) for c in elite.tour.tolist() if c in members]


def _route_cost(dist: np.ndarray, seq: Sequence[int]) -> float:
    total = dist[0, seq[0]] + dist[seq[-1], 0]
    for a, b in zip(seq[:-1], seq[1:]):
        total += dist[a, b]
    return float(total)


def run_assembly(assembly: SolverAssembly, instance: Instance,
                 budget: AssemblyBudget, seed: int = 0) -> AssemblyRunResult:
    """Decomposed solving loop.

    Each cycle: evolve the global population for the trigger period, pick
    an elite, partition the instance, solve each subproblem with the
    tier-3 sub-solver (seeded with the elite's restriction), and
    reintegrate per the tier-1 rule. Iteration-based budgets make the
    whole run deterministic in (assembly, instance, seed).
    """
    t1, t2, t3 = assembly.tier1, assembly.tier2, assembly.tier3
    rng = np.random.default_rng(child_seed(seed, "assembly"))
    n = instance.n_customers

    global_cfg = HgsConfig.from_dict(
        {**HgsConfig().to_dict(), **t1.global_overrides})
    global_cfg = replace(global_cfg, seed=child_seed(seed, "global"))
    solver = HgsSolver(instance, global_cfg)

    t_start = time.perf_counter()

    def remaining() -> float:
        if budget.wall_seconds is None:
            return math.inf
        return budget.wall_seconds - (time.perf_counter() - t_start)

    events: List[DecompositionEvent] = []
    cycle = 0
    f_iters = t1.decomposition_trigger_period
    if budget.max_global_iters is not None:
        f_iters = min(f_iters, budget.max_global_iters)
    sub_iters = t3.budget_per_subproblem
    if budget.max_sub_iters is not None:
        sub_iters = min(sub_iters, budget.max_sub_iters)

    while True:
        if budget.cycles is not None and cycle >= budget.cycles:
            break
        if budget.cycles is None and remaining() <= 0:
            break

        # global phase
        t_global0 = time.perf_counter()
        step_kwargs = {"max_iterations": f_iters}
        if budget.wall_seconds is not None:
            step_kwargs["wall_seconds"] = max(0.0, remaining())
        solver.step(Budget(**step_kwargs))
        t_global = time.perf_counter() - t_global0
        if budget.cycles is None and remaining() <= 0:
            cycle += 1
            break

        elite = _select_elite(solver, t1.elite_selection_rule, rng)
        if elite is None:
            cycle += 1
            continue
        elite_sol = _elite_solution(solver, elite)

        # tier-1 granularity governs unless tier-2 pins a cluster count
        params = t2.params
        if params.cluster_count is not None:
            params = replace(params,
                             cluster_count=min(params.cluster_count, n),
                             seed=child_seed(seed, "decomp", cycle))
        else:
            params = replace(params,
                             target_size=max(2, t1.target_subproblem_size),
                             seed=child_seed(seed, "decomp", cycle))
        subproblems = decompose(instance, elite_sol, params)
        partition_ok = not validate_partition(instance, subproblems)

        # sub-solver phase
        sub_wall = None
        if budget.wall_seconds is not None:
            share = t_global * (1.0 - t1.budget_split) / t1.budget_split
            sub_wall = min(share, max(0.0, remaining()))
        elite_route_sets = [frozenset(r.sequence) for r in elite_sol.routes]
        aligned_all = True
        candidate_routes: List[List[int]] = []
        for idx, sp in enumerate(subproblems):
            members = set(sp.customer_ids)
            inside = [rs for rs in elite_route_sets if rs <= members]
            aligned = sum(len(rs) for rs in inside) == len(members)
            aligned_all = aligned_all and aligned

            local_n = sp.local_instance.n_customers
            sub_cfg = replace(
                t3.config,
                granularity=max(1, min(t3.config.granularity, local_n - 1))
                if local_n > 1 else 1,
                seed=child_seed(seed, "sub", cycle, idx))
            sub_solver = HgsSolver(sp.local_instance, sub_cfg)
            sub_solver.initialize()
            g2l = {int(g): l for l, g in enumerate(sp.id_map) if l > 0}
            seed_tour = [g2l[c] for c in _restricted_tour(elite, members)]
            if seed_tour:
                sub_solver._register(sub_solver._educate(
                    np.array(seed_tour, dtype=np.int32)))
            sub_step = {"max_iterations": sub_iters}
            if sub_wall is not None:
                sub_step["wall_seconds"] = max(
                    0.0, min(sub_wall / len(subproblems), remaining()))
            sub_solver.step(Budget(**sub_step))
            local_best = sub_solver.best_solution()
            routes_global = sp.to_global(
                [list(r.sequence) for r in local_best.routes])

            if aligned and local_best.feasible:
                part_cost = sum(_route_cost(solver.dist, list(rs_seq))
                                for rs_seq in
                                (r.sequence for r in elite_sol.routes
                                 if frozenset(r.sequence) <= members))
                if local_best.cost < part_cost:
                    candidate_routes.extend(routes_global)
                else:
                    candidate_routes.extend(
                        [list(r.sequence) for r in elite_sol.routes
                         if frozenset(r.sequence) <= members])
            else:
                candidate_routes.extend(routes_global)

        events.append(DecompositionEvent(cycle=cycle,
                                         n_subproblems=len(subproblems),
                                         partition_ok=partition_ok,
                                         aligned=aligned_all))

        candidate = solver.individual_from_routes(candidate_routes)
        rule = t1.reintegration_rule
        if rule == "replace-if-route-set-improves":
            if candidate.feasible and candidate.cost < elite.cost - 1e-9:
                solver._register(candidate)
        elif rule == "always-replace":
            for i, ind in enumerate(solver.population):
                if ind is elite:
                    solver.population.pop(i)
                    solver._fitness_cache = None
                    break
            solver._register(candidate)
        else:  # population-insert
            solver._register(candidate)
        solver._survivor_selection()
        cycle += 1

    if solver.best is None and solver.best_penalized is None:
        solver.initialize()
    if solver.best is not None:
        solution = solver.best_solution()
    else:
        # guaranteed-feasible fallback: one customer per route
        solution = make_solution(instance,
                                 [[c] for c in range(1, n + 1)])
    return AssemblyRunResult(solution=solution,
                             trace=list(solver.trace),
                             cycles=cycle,
                             events=events,
                             wall_seconds=time.perf_counter() - t_start)
