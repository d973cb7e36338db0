"""Component generation: instance profiling and descriptor backends.

The analyzer condenses a training set into a numeric profile plus a
deterministic summary string that conditions generation. Descriptors come
either from a deterministic mock (catalog sampling with seeded jitter, a
pure function of seed and context) or from an LLM over HTTP constrained to
schema-bound JSON with bounded repair retries and a catalog fallback, so a
dead endpoint can never stall the search.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .cvrp import Instance
from .decompose import DecompositionParams, strategy_catalog, _kmeans
from .hgs import HgsConfig, OperatorToggles
from .hierarchy import (
    ELITE_RULES,
    REINTEGRATION_RULES,
    TIER1_RANGES,
    TIER3_RANGES,
    DecompositionDescriptor,
    FrameworkDescriptor,
    SubSolverDescriptor,
    descriptor_canonical_text,
    descriptor_from_dict,
    validate_descriptor,
)
from .rng import child_rng, text_fingerprint

logger = logging.getLogger(__name__)

_PROMPTS_DIR = os.path.join(os.path.dirname(__file__), "prompts")


# ---------------------------------------------------------------------------
# analyzer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalyzerReport:
    n_customers: float
    bounding_box: tuple            # (xmin, ymin, xmax, ymax), averaged
    nearest_neighbor_stats: tuple  # (mean, std)
    cluster_tendency: float        # best silhouette over k in 2..8
    depot_centrality: float
    demand_stats: tuple            # (mean/Q, std/Q, max/Q)

    @property
    def summary_text(self) -> str:
        x0, y0, x1, y1 = self.bounding_box
        nn_mean, nn_std = self.nearest_neighbor_stats
        dm, ds, dx = self.demand_stats
        return (f"{self.n_customers:.0f} customers in a "
                f"{x1 - x0:.0f}x{y1 - y0:.0f} box; "
                f"nearest-neighbor spacing {nn_mean:.1f}+-{nn_std:.1f}; "
                f"cluster tendency {self.cluster_tendency:.2f}; "
                f"depot centrality {self.depot_centrality:.2f}; "
                f"demand mean {dm:.2f}Q, std {ds:.2f}Q, max {dx:.2f}Q")

    def to_dict(self) -> dict:
        return {"n_customers": self.n_customers,
                "bounding_box": list(self.bounding_box),
                "nearest_neighbor_stats": list(self.nearest_neighbor_stats),
                "cluster_tendency": self.cluster_tendency,
                "depot_centrality": self.depot_centrality,
                "demand_stats": list(self.demand_stats),
                "summary_text": self.summary_text}


def _silhouette(coords: np.ndarray, labels: np.ndarray, k: int) -> float:
    n = coords.shape[0]
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        own_count = own.sum() - 1
        if own_count == 0:
            scores[i] = 0.0
            continue
        a = d[i][own].sum() / own_count
        b = np.inf
        for c in range(k):
            if c == labels[i] or not (labels == c).any():
                continue
            b = min(b, d[i][labels == c].mean())
        scores[i] = 0.0 if not np.isfinite(b) else (b - a) / max(a, b)
    return float(scores.mean())


def _cluster_tendency(coords: np.ndarray) -> float:
    n = coords.shape[0]
    if n < 3:
        return 0.0
    best = -1.0
    for k in range(2, min(8, n - 1) + 1):
        labels = _kmeans(coords, k, child_rng(0, "analyze-kmeans", k))
        best = max(best, _silhouette(coords, labels, k))
    return best


def analyze(instances: Sequence[Instance]) -> AnalyzerReport:
    """Average distributional profile of the training instances."""
    if not instances:
        raise ValueError("analyzer needs at least one instance")
    rows = []
    for inst in instances:
        coords = inst.coords
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        if coords.shape[0] > 1:
            d = np.linalg.norm(coords[:, None, :] - coords[None, :, :],
                               axis=2)
            np.fill_diagonal(d, np.inf)
            nn = d.min(axis=1)
            nn_mean, nn_std = float(nn.mean()), float(nn.std())
        else:
            nn_mean = nn_std = 0.0
        diag = float(np.linalg.norm(hi - lo))
        centroid = coords.mean(axis=0)
        centrality = (min(1.0, float(np.linalg.norm(inst.depot - centroid))
                          / diag) if diag > 0 else 0.0)
        q = inst.capacity
        rows.append([
            inst.n_customers, lo[0], lo[1], hi[0], hi[1], nn_mean, nn_std,
            _cluster_tendency(coords), centrality,
            float(inst.demands.mean() / q), float(inst.demands.std() / q),
            float(inst.demands.max() / q),
        ])
    m = np.array(rows).mean(axis=0)
    return AnalyzerReport(
        n_customers=float(m[0]),
        bounding_box=(float(m[1]), float(m[2]), float(m[3]), float(m[4])),
        nearest_neighbor_stats=(float(m[5]), float(m[6])),
        cluster_tendency=float(m[7]),
        depot_centrality=float(m[8]),
        demand_stats=(float(m[9]), float(m[10]), float(m[11])))


# ---------------------------------------------------------------------------
# prompt context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptContext:
    tier: int
    path_descriptors: Dict[int, object] = field(default_factory=dict)
    analyzer_report: Optional[AnalyzerReport] = None
    fewshot_library: str = ""
    negative_constraints: tuple = ()
    nonce: int = 0          # varies rollout completions and regrow attempts

    def fingerprint(self) -> str:
        parts = [str(self.tier), str(self.nonce)]
        for tier in sorted(self.path_descriptors):
            parts.append(descriptor_canonical_text(
                tier, self.path_descriptors[tier]))
        if self.analyzer_report is not None:
            parts.append(self.analyzer_report.summary_text)
        parts.extend(self.negative_constraints)
        return text_fingerprint("\n####\n".join(parts))

    def path_text(self) -> str:
        if not self.path_descriptors:
            return "(none)"
        return "\n".join(descriptor_canonical_text(t, d)
                         for t, d in sorted(self.path_descriptors.items()))


def fewshot_library_text() -> str:
    return json.dumps(strategy_catalog(), indent=2, sort_keys=True)


def schema_text(tier: int) -> str:
    if tier == 1:
        return json.dumps({
            "target_subproblem_size":
                f"integer in {list(TIER1_RANGES['target_subproblem_size'])}",
            "decomposition_trigger_period":
                f"integer in "
                f"{list(TIER1_RANGES['decomposition_trigger_period'])}",
            "elite_selection_rule": list(ELITE_RULES),
            "reintegration_rule": list(REINTEGRATION_RULES),
            "budget_split": f"float in {list(TIER1_RANGES['budget_split'])}",
            "global_overrides": "optional subset of the tier-3 config keys",
            "rationale": "one or two sentences",
        }, indent=2)
    if tier == 2:
        return json.dumps({
            "strategy_id": [e["id"] for e in strategy_catalog()],
            "target_size": "integer >= 2 (granularity; tier 1 governs)",
            "strategy_specific": "object with the strategy's params",
            "rationale": "one or two sentences",
        }, indent=2)
    return json.dumps({
        "config": {key: f"number in {list(rng)}"
                   for key, rng in TIER3_RANGES.items()
                   if key != "budget_per_subproblem"},
        "budget_per_subproblem":
            f"integer in {list(TIER3_RANGES['budget_per_subproblem'])}",
        "operator_toggles": "booleans: relocate, swap11, swap22, swap33, "
                            "two_opt, two_opt_star",
        "rationale": "one or two sentences",
    }, indent=2)


def render_prompt(tier: int, context: PromptContext,
                  regrowth: bool = False) -> str:
    name = "regrowth.txt" if regrowth else f"tier{tier}.txt"
    with open(os.path.join(_PROMPTS_DIR, name), encoding="utf-8") as fh:
        template = fh.read()
    negatives = ""
    if context.negative_constraints:
        listed = "\n---\n".join(context.negative_constraints)
        if regrowth:
            return template.format(negative_constraints=listed)
        negatives = ("\nGenerate a new heuristic strategy that is distinct "
                     "in logic and structure from each of:\n" + listed)
    report = (context.analyzer_report.summary_text
              if context.analyzer_report else "(no profile)")
    return template.format(analyzer_report=report,
                           path_context=context.path_text(),
                           schema=schema_text(tier),
                           fewshot=context.fewshot_library or "(library omitted)",
                           negative_constraints=negatives)


# ---------------------------------------------------------------------------
# deterministic mock backend
# ---------------------------------------------------------------------------

def _uniform_int(rng, lo_hi):
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _uniform(rng, lo_hi):
    return float(np.round(rng.uniform(lo_hi[0], lo_hi[1]), 4))


class MockGenerator:
    """Catalog sampler: a pure function of (seed, context, k).

    duplicate_rate > 0 turns it into the duplicate-injection variant used
    to exercise pruning: each slot after the first is, with that
    probability, an exact copy of an earlier candidate in the batch.
    """

    def __init__(self, seed: int = 0, duplicate_rate: float = 0.0):
        self.seed = seed
        self.duplicate_rate = duplicate_rate
        self._catalog = strategy_catalog()

    # -- sampling ----------------------------------------------------------

    # rationale fragments use deliberately disjoint vocabulary per logic
    # class: the wording is what lets the similarity distance separate
    # genuinely different designs from parameter jitter
    _ELITE_PHRASES = {
        "best-feasible": "anchored on the cheapest capacity-respecting tour",
        "best-penalized": "guided by the strongest scorer, violations "
                          "tolerated",
        "tournament-of-top-p": "drafting a contender from the leading "
                               "quartile by lot",
    }
    _REINTEGRATION_PHRASES = {
        "replace-if-route-set-improves":
            "merged work lands only when strictly cheaper, incumbents "
            "stay protected",
        "always-replace":
            "merged work unconditionally supplants its predecessor",
        "population-insert":
            "merged work enters as one more contender facing survival "
            "pressure",
    }
    _TEMPO_PHRASES = (
        (40, "carving again eagerly after {p} steps"),
        (120, "carving on a steady rhythm of {p} steps"),
        (10**9, "carving seldom, letting {p} steps pass"),
    )
    _GRAIN_PHRASES = (
        (60, "small pockets around {m} stops"),
        (160, "medium territories around {m} stops"),
        (10**9, "sprawling regions around {m} stops"),
    )

    @staticmethod
    def _pick(phrases, value):
        for bound, phrase in phrases:
            if value < bound:
                return phrase
        return phrases[-1][1]

    def _sample_tier1(self, rng) -> FrameworkDescriptor:
        m = _uniform_int(rng, TIER1_RANGES["target_subproblem_size"])
        period = _uniform_int(rng,
                              TIER1_RANGES["decomposition_trigger_period"])
        elite_rule = str(rng.choice(ELITE_RULES))
        reint = str(rng.choice(REINTEGRATION_RULES))
        split_share = _uniform(rng, TIER1_RANGES["budget_split"])
        overrides = {}
        if rng.random() < 0.5:
            overrides["population_size"] = _uniform_int(rng, (10, 32))
        if rng.random() < 0.5:
            overrides["generation_size"] = _uniform_int(rng, (16, 48))
        if rng.random() < 0.3:
            overrides["granularity"] = _uniform_int(rng, (10, 30))
        rationale = "; ".join([
            self._pick(self._TEMPO_PHRASES, period).format(p=period),
            self._pick(self._GRAIN_PHRASES, m).format(m=m),
            self._ELITE_PHRASES[elite_rule],
            self._REINTEGRATION_PHRASES[reint],
        ]) + "."
        return FrameworkDescriptor(
            target_subproblem_size=m,
            decomposition_trigger_period=period,
            elite_selection_rule=elite_rule,
            reintegration_rule=reint,
            budget_split=split_share,
            global_overrides=overrides,
            rationale=rationale)

    _STRATEGY_PHRASES = {
        "route-barycenter-kmeans":
            "treat each elite route as one indivisible unit and group "
            "routes whose barycenters gravitate together",
        "customer-kmeans":
            "iterate centroid assignments over raw customer coordinates "
            "until the clustering reaches a fixpoint",
        "balanced-kmeans":
            "steer the centroid assignment so accumulated demand stays "
            "level across the resulting clusters",
        "polar-sweep":
            "rotate a ray around the depot and slice the plane into "
            "consecutive angular wedges",
        "angular-radial":
            "combine angular wedges with radius bands, separating the "
            "near ring from the far ring inside each wedge",
        "voronoi-seeds":
            "scatter mutually remote seed points and let every customer "
            "join the cell of its closest seed",
        "density-grouping":
            "let dense neighborhoods condense into cores and attach "
            "sparse outliers to whichever core sits nearest",
        "elite-route-grouping":
            "shuffle whole elite routes and deal them into batches "
            "without looking at geometry",
        "spatial-grid":
            "lay a rectangular lattice over the bounding box and read "
            "the occupied cells off as subproblems",
        "agglomerative-merge":
            "repeatedly fuse the two closest groups, bottom-up, until "
            "the count comes down to the goal",
        "kd-median":
            "bisect the customer cloud at the median of its wider axis "
            "and recurse on both halves",
    }

    def _sample_tier2(self, rng,
                      exclude: Sequence[str] = ()) -> DecompositionDescriptor:
        pool = [e for e in self._catalog if e["id"] not in exclude]
        if not pool:
            pool = self._catalog
        entry = pool[int(rng.integers(len(pool)))]
        spec = {}
        for key, bounds in entry["params"].items():
            val = rng.uniform(bounds["min"], bounds["max"])
            spec[key] = float(np.round(val, 4))
            if key == "min_pts":
                spec[key] = int(round(spec[key]))
        m = _uniform_int(rng, (20, 200))
        return DecompositionDescriptor(
            params=DecompositionParams(strategy_id=entry["id"],
                                       target_size=m,
                                       strategy_specific=spec,
                                       seed=int(rng.integers(2**31))),
            rationale=self._STRATEGY_PHRASES[entry["id"]].capitalize() + ".")

    def _sample_tier3(self, rng) -> SubSolverDescriptor:
        mu = _uniform_int(rng, TIER3_RANGES["population_size"])
        lam = _uniform_int(rng, TIER3_RANGES["generation_size"])
        elite = _uniform(rng, TIER3_RANGES["elite_fraction"])
        if elite * mu < 1.0:
            elite = max(elite, 1.5 / mu)
        gran = _uniform_int(rng, TIER3_RANGES["granularity"])
        toggles = OperatorToggles(
            relocate=True,
            swap11=bool(rng.random() < 0.8),
            swap22=bool(rng.random() < 0.6),
            swap33=bool(rng.random() < 0.3),
            two_opt=True,
            two_opt_star=bool(rng.random() < 0.8))
        config = HgsConfig(
            population_size=mu,
            generation_size=lam,
            elite_fraction=float(np.round(elite, 4)),
            granularity=gran,
            capacity_penalty_init=_uniform(
                rng, TIER3_RANGES["capacity_penalty_init"]),
            penalty_adapt_factor=_uniform(
                rng, TIER3_RANGES["penalty_adapt_factor"]),
            target_feasible_ratio=_uniform(
                rng, TIER3_RANGES["target_feasible_ratio"]),
            diversity_neighbors=_uniform_int(
                rng, TIER3_RANGES["diversity_neighbors"]),
            operator_toggles=toggles)
        budget = _uniform_int(rng, TIER3_RANGES["budget_per_subproblem"])
        op_phrases = []
        if toggles.swap11:
            op_phrases.append("single-customer trades")
        if toggles.swap22:
            op_phrases.append("paired-segment barter")
        if toggles.swap33:
            op_phrases.append("costly triple-segment commerce")
        if toggles.two_opt_star:
            op_phrases.append("tail grafting between vehicles")
        pop_phrase = (f"tight crew, {mu} tours" if mu < 16 else
                      f"wide roster, {mu} tours")
        depth_phrase = (f"glancing at just {gran} adjacent stops"
                        if gran < 12 else
                        f"sweeping a {gran}-wide perimeter")
        effort = (f"quick polish over {budget} rounds" if budget < 200 else
                  f"marathon grind over {budget} rounds")
        rationale = (f"{pop_phrase}; {depth_phrase}; "
                     f"{', '.join(op_phrases) or 'relocation alone'}; "
                     f"{effort}.")
        return SubSolverDescriptor(config=config,
                                   budget_per_subproblem=budget,
                                   rationale=rationale)

    def _sample(self, tier: int, rng, exclude=()):
        if tier == 1:
            return self._sample_tier1(rng)
        if tier == 2:
            return self._sample_tier2(rng, exclude)
        if tier == 3:
            return self._sample_tier3(rng)
        raise ValueError(f"no tier {tier}")

    # -- backend protocol ---------------------------------------------------

    def generate(self, tier: int, context: PromptContext, k: int) -> List:
        rng = child_rng(self.seed, "mock-gen", tier, k,
                        context.fingerprint())
        out = []
        for slot in range(k):
            if (self.duplicate_rate > 0.0 and out
                    and rng.random() < self.duplicate_rate):
                out.append(out[int(rng.integers(len(out)))])
                continue
            cand = self._sample(tier, rng)
            assert not validate_descriptor(tier, cand)
            out.append(cand)
        return out

    def regrow(self, tier: int, context: PromptContext,
               attempt: int = 0):
        rng = child_rng(self.seed, "mock-regrow", tier, attempt,
                        context.fingerprint())
        exclude = []
        if tier == 2:
            for text in context.negative_constraints:
                for line in text.splitlines():
                    if line.startswith("strategy="):
                        exclude.append(line.split("=", 1)[1])
        return self._sample(tier, rng, exclude=exclude)


# ---------------------------------------------------------------------------
# LLM HTTP backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model_name: str
    temperature: float = 0.8
    regrow_temperature: float = 1.0
    max_output_tokens: int = 1024
    timeout_seconds: float = 30.0
    max_retries: int = 2
    api_key_env_var_name: str = "ROUTEFORGE_API_KEY"

    def __post_init__(self):
        if self.temperature < 0 or self.regrow_temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        lines = text.splitlines()
        lines = lines[1:]
        if lines and lines[-1].strip().startswith("```"):
            lines = lines[:-1]
        text = "\n".join(lines)
    return text.strip()


class LlmGenerator:
    """Schema-constrained descriptor generation over an OpenAI-style chat
    endpoint. Malformed output gets up to two repair re-prompts per slot,
    then the slot falls back to a catalog sample; transport failures after
    the configured retries degrade the whole call to catalog sampling."""

    REPAIRS_PER_SLOT = 2

    def __init__(self, endpoint: LlmEndpointConfig,
                 fallback: Optional[MockGenerator] = None,
                 transport: Optional[Callable] = None):
        self.endpoint = endpoint
        self.fallback = fallback or MockGenerator(seed=0)
        self._transport = transport or self._http_transport
        self.stats = {"requests": 0, "repairs": 0, "fallbacks": 0}

    def _http_transport(self, payload: dict) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.endpoint.api_key_env_var_name, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        resp = requests.post(self.endpoint.base_url, json=payload,
                             headers=headers,
                             timeout=self.endpoint.timeout_seconds)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def _chat(self, messages: List[dict], temperature: float) -> str:
        payload = {"model": self.endpoint.model_name,
                   "messages": messages,
                   "temperature": temperature,
                   "max_tokens": self.endpoint.max_output_tokens}
        last_error = None
        for _ in range(self.endpoint.max_retries + 1):
            try:
                self.stats["requests"] += 1
                return self._transport(payload)
            except Exception as exc:   # transport trouble: retry then give up
                last_error = exc
        raise ConnectionError(f"endpoint unreachable: {last_error}")

    def _one_descriptor(self, tier: int, context: PromptContext,
                        regrowth: bool):
        temperature = (self.endpoint.regrow_temperature if regrowth
                       else self.endpoint.temperature)
        messages = [{"role": "user",
                     "content": render_prompt(tier, context,
                                              regrowth=regrowth)}]
        for attempt in range(self.REPAIRS_PER_SLOT + 1):
            raw = self._chat(messages, temperature)
            try:
                data = json.loads(_strip_fences(raw))
                descriptor = descriptor_from_dict(tier, data)
                problems = validate_descriptor(tier, descriptor)
                if problems:
                    raise ValueError("; ".join(problems))
                return descriptor, attempt
            except (ValueError, KeyError, TypeError) as exc:
                if attempt == self.REPAIRS_PER_SLOT:
                    break
                self.stats["repairs"] += 1
                messages.append({"role": "assistant", "content": raw[:4000]})
                messages.append({
                    "role": "user",
                    "content": ("The object was invalid "
                                f"({exc}). Return ONLY a corrected JSON "
                                "object matching the schema.")})
        return None, self.REPAIRS_PER_SLOT

    def generate(self, tier: int, context: PromptContext, k: int) -> List:
        out = []
        for slot in range(k):
            try:
                descriptor, _ = self._one_descriptor(tier, context,
                                                     regrowth=False)
            except ConnectionError as exc:
                logger.warning("generation degraded to catalog sampling: %s",
                               exc)
                self.stats["fallbacks"] += k - slot
                rest = self.fallback.generate(
                    tier, replace(context, nonce=context.nonce + slot + 1),
                    k - slot)
                out.extend(rest)
                return out
            if descriptor is None:
                self.stats["fallbacks"] += 1
                descriptor = self.fallback.generate(
                    tier, replace(context, nonce=context.nonce + slot + 1),
                    1)[0]
            out.append(descriptor)
        return out

    def regrow(self, tier: int, context: PromptContext, attempt: int = 0):
        try:
            descriptor, _ = self._one_descriptor(tier, context,
                                                 regrowth=True)
        except ConnectionError as exc:
            logger.warning("regrowth degraded to catalog sampling: %s", exc)
            self.stats["fallbacks"] += 1
            return self.fallback.regrow(tier, context, attempt)
        return descriptor


class PinnedGenerator:
    """Wrapper that pins one tier to a fixed descriptor (ablations)."""

    def __init__(self, base, pins: Dict[int, object]):
        self.base = base
        self.pins = dict(pins)

    def generate(self, tier: int, context: PromptContext, k: int) -> List:
        if tier in self.pins:
            return [self.pins[tier]]
        return self.base.generate(tier, context, k)

    def regrow(self, tier: int, context: PromptContext, attempt: int = 0):
        if tier in self.pins:
            return None
        return self.base.regrow(tier, context, attempt)
