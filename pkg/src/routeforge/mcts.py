"""Tree search over the three-tier component space.

Selection walks UCT over non-pruned children (unvisited first), expansion
asks the generator for K candidates and prunes semantically redundant ones
against both the fresh batch and the existing siblings, regrowth refills
pruned slots under negative constraints, rollout completes partial paths
with single samples, and evaluation runs the assembled solver over the
training set, turning the mean gap into a bounded reward 1/(1+gap).

Every random choice derives from the master seed plus a logical counter,
so two runs with the same configuration produce byte-identical search
logs and checkpoints; log records carry the logical event counter rather
than wall time for exactly that reason.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .cvrp import Instance
from .generator import AnalyzerReport, PromptContext, analyze, fewshot_library_text
from .hgs import Budget, HgsConfig, HgsSolver
from .hierarchy import (
    AssemblyBudget,
    SolverAssembly,
    assemble,
    descriptor_canonical_text,
    descriptor_from_dict,
    run_assembly,
    validate_descriptor,
)
from .rng import child_rng, child_seed, text_fingerprint
from .similarity import (
    PairwiseCache,
    PruneEntry,
    WsmdConfig,
    batch_kappa,
    fused_distance,
    prune_set,
    tokenize_and_embed,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SearchConfig:
    k_branches: int = 9               # candidates per expansion
    exploration: float = 1.0          # UCT exploration constant
    epsilon: float = 0.5              # pruning threshold
    eval_budget: int = 1000
    rollout_count: int = 1
    per_eval_time_budget: Optional[float] = None   # seconds; None = cycles
    per_eval_cycles: int = 1
    per_eval_global_iters: Optional[int] = 30
    per_eval_sub_iters: Optional[int] = 60
    reference_iterations: int = 1500  # long default-run for reference costs
    seed: int = 0
    prune_enabled: bool = True
    regrow_enabled: bool = True
    regrow_max_attempts: int = 3
    wsmd: WsmdConfig = field(default_factory=WsmdConfig)

    def __post_init__(self):
        if self.k_branches < 1 or self.eval_budget < 1:
            raise ValueError("k_branches and eval_budget must be >= 1")
        if self.exploration < 0 or self.epsilon < 0:
            raise ValueError("exploration and epsilon must be >= 0")


@dataclass
class TreeNode:
    node_id: int
    tier_level: int                       # 0 = root
    descriptor: Optional[object] = None
    visits: int = 0
    q_mean: float = 0.0
    children: List["TreeNode"] = field(default_factory=list)
    pruned: bool = False
    creation_index: int = 0
    parent: Optional["TreeNode"] = None

    def live_children(self) -> List["TreeNode"]:
        return [c for c in self.children if not c.pruned]

    def canonical_text(self) -> str:
        if self.descriptor is None:
            return ""
        return descriptor_canonical_text(self.tier_level, self.descriptor)


@dataclass(frozen=True)
class RewardRecord:
    assembly: SolverAssembly
    mean_gap: float                  # clamped at 0 so reward stays in (0,1]
    reward: float
    per_instance_gaps: Tuple[float, ...]
    eval_index: int


def uct_score(parent_visits: int, child_q: float, child_visits: int,
              exploration: float) -> float:
    return child_q + exploration * math.sqrt(
        2.0 * math.log(parent_visits) / child_visits)


def select_child(node: TreeNode, exploration: float) -> TreeNode:
    """Unvisited children first (creation order); otherwise UCT argmax with
    ties broken by the lowest creation index."""
    live = node.live_children()
    if not live:
        raise LookupError("all children pruned; regrowth needed")
    unvisited = [c for c in live if c.visits == 0]
    if unvisited:
        return min(unvisited, key=lambda c: c.creation_index)
    best = None
    best_score = -math.inf
    for child in live:
        score = uct_score(node.visits, child.q_mean, child.visits,
                          exploration)
        if (score > best_score
                or (score == best_score
                    and child.creation_index < best.creation_index)):
            best = child
            best_score = score
    return best


def backpropagate(path: Sequence[TreeNode], reward: float) -> None:
    for node in path:
        node.visits += 1
        node.q_mean += (reward - node.q_mean) / node.visits


class SearchLog:
    """JSONL event log keyed by a logical step counter (no wall time, so
    identical runs produce identical bytes)."""

    def __init__(self):
        self.events: List[dict] = []

    def append(self, event_type: str, **payload) -> None:
        record = {"step": len(self.events), "event": event_type}
        record.update(payload)
        self.events.append(record)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True)
                         for e in self.events) + "\n"

    def count(self, event_type: str) -> int:
        return sum(1 for e in self.events if e["event"] == event_type)


class MctsEngine:
    """Owns the tree, the generator backend, and the evaluation harness."""

    def __init__(self, train_instances: Sequence[Instance],
                 config: SearchConfig, generator,
                 references: Optional[Dict[str, float]] = None):
        if not train_instances:
            raise ValueError("need at least one training instance")
        self.instances = list(train_instances)
        self.config = config
        self.generator = generator
        self.log = SearchLog()
        self.cache = PairwiseCache()
        self.root = TreeNode(node_id=0, tier_level=0)
        self._nodes: List[TreeNode] = [self.root]
        self.eval_count = 0
        self.best: Optional[RewardRecord] = None
        self.analyzer_report: AnalyzerReport = analyze(self.instances)
        self.references = references or self._compute_references()
        self._fewshot = fewshot_library_text()
        self.log.append("references",
                        values={k: round(v, 6)
                                for k, v in sorted(self.references.items())})

    # -- reference costs -----------------------------------------------------

    def _compute_references(self) -> Dict[str, float]:
        """Long-budget default-config runs anchor the training gaps when no
        best-known costs exist for synthetic instances."""
        refs = {}
        for inst in self.instances:
            if inst.bks is not None:
                refs[inst.name] = float(inst.bks)
                continue
            cfg = HgsConfig(seed=child_seed(self.config.seed, "ref",
                                            inst.name))
            solver = HgsSolver(inst, cfg)
            solver.step(Budget(
                max_iterations=self.config.reference_iterations,
                max_no_improve=max(200,
                                   self.config.reference_iterations // 3)))
            refs[inst.name] = solver.best_solution().cost
        return refs

    # -- evaluation ------------------------------------------------------------

    def _eval_budget(self) -> AssemblyBudget:
        if self.config.per_eval_time_budget is not None:
            return AssemblyBudget(
                wall_seconds=self.config.per_eval_time_budget,
                max_global_iters=self.config.per_eval_global_iters,
                max_sub_iters=self.config.per_eval_sub_iters)
        return AssemblyBudget(
            cycles=self.config.per_eval_cycles,
            max_global_iters=self.config.per_eval_global_iters,
            max_sub_iters=self.config.per_eval_sub_iters)

    def evaluate(self, assembly: SolverAssembly) -> RewardRecord:
        gaps = []
        for inst in self.instances:
            ref = self.references[inst.name]
            try:
                result = run_assembly(assembly, inst, self._eval_budget(),
                                      seed=child_seed(self.config.seed,
                                                      "eval", inst.name))
                if not result.solution.feasible:
                    gaps.append(math.inf)
                    continue
                gaps.append((result.solution.cost - ref) / ref)
            except Exception as exc:
                self.log.append("eval_error", error=repr(exc)[:200])
                gaps.append(math.inf)
        if all(math.isfinite(g) for g in gaps):
            # clamp: a run that beats the reference counts as gap 0 so the
            # reward stays in (0, 1]
            mean_gap = max(0.0, sum(gaps) / len(gaps))
            reward = 1.0 / (1.0 + mean_gap)
        else:
            mean_gap, reward = math.inf, 0.0
        self.eval_count += 1
        record = RewardRecord(assembly=assembly,
                              mean_gap=mean_gap,
                              reward=reward,
                              per_instance_gaps=tuple(
                                  round(g, 12) if math.isfinite(g) else g
                                  for g in gaps),
                              eval_index=self.eval_count)
        if self.best is None or record.reward > self.best.reward:
            self.best = record
            self.log.append("best", eval_index=record.eval_index,
                            reward=record.reward)
        return record

    # -- tree construction -----------------------------------------------------

    def _new_node(self, parent: TreeNode, tier: int, descriptor,
                  pruned: bool = False) -> TreeNode:
        node = TreeNode(node_id=len(self._nodes), tier_level=tier,
                        descriptor=descriptor, pruned=pruned,
                        creation_index=len(self._nodes), parent=parent)
        self._nodes.append(node)
        parent.children.append(node)
        return node

    def _context(self, node: TreeNode, negatives: tuple = (),
                 nonce: int = 0) -> PromptContext:
        path_desc = {}
        cur = node
        while cur is not None and cur.tier_level > 0:
            path_desc[cur.tier_level] = cur.descriptor
            cur = cur.parent
        tier = node.tier_level + 1
        return PromptContext(
            tier=tier,
            path_descriptors=path_desc,
            analyzer_report=self.analyzer_report,
            fewshot_library=self._fewshot if tier == 2 else "",
            negative_constraints=negatives,
            nonce=nonce)

    def expand(self, node: TreeNode) -> List[TreeNode]:
        """Generate K candidates, prune against fresh + existing siblings,
        regrow pruned slots, and attach the survivors as children."""
        tier = node.tier_level + 1
        context = self._context(node)
        candidates = self.generator.generate(tier, context,
                                             self.config.k_branches)
        for descriptor in candidates:
            problems = validate_descriptor(tier, descriptor)
            if problems:      # generator contract violated
                raise ValueError(f"generator produced invalid tier-{tier} "
                                 f"descriptor: {problems}")

        if not self.config.prune_enabled:
            created = [self._new_node(node, tier, d) for d in candidates]
            self.log.append("expand", node_id=node.node_id, tier=tier,
                            generated=len(candidates),
                            children=[c.node_id for c in created],
                            pruned=0, regrown=0)
            return created

        entries = []
        for sibling in node.live_children():
            entries.append(PruneEntry(
                candidate=tokenize_and_embed(sibling.canonical_text(),
                                             self.config.wsmd),
                q_value=sibling.q_mean if sibling.visits > 0 else None,
                creation_index=sibling.creation_index,
                payload=("node", sibling)))
        base_index = len(self._nodes)
        for offset, descriptor in enumerate(candidates):
            text = descriptor_canonical_text(tier, descriptor)
            entries.append(PruneEntry(
                candidate=tokenize_and_embed(text, self.config.wsmd),
                q_value=None,
                creation_index=base_index + offset,
                payload=("fresh", descriptor)))

        kappa = batch_kappa([e.candidate for e in entries],
                            self.config.wsmd, self.cache)
        retained, pruned_pairs = prune_set(entries, self.config.epsilon,
                                           kappa, self.config.wsmd,
                                           self.cache)
        retained_set = {id(e) for e in retained}

        created: List[TreeNode] = []
        regrown = 0
        for entry in entries:
            kind, payload = entry.payload
            if kind != "fresh":
                if id(entry) not in retained_set:   # cannot happen by rule
                    raise AssertionError("existing sibling pruned")
                continue
            if id(entry) in retained_set:
                created.append(self._new_node(node, tier, payload))
            else:
                tombstone = self._new_node(node, tier, payload, pruned=True)
                report = next(p.report for p in pruned_pairs
                              if p.loser is entry)
                self.log.append("prune", node_id=tombstone.node_id,
                                parent=node.node_id, tier=tier,
                                d_wmd=round(report.d_wmd, 9),
                                d_smd=round(report.d_smd, 9),
                                kappa=round(report.kappa, 9),
                                fused=round(report.fused, 9))
                if self.config.regrow_enabled:
                    replacement = self._regrow(node, tier, retained, kappa)
                    if replacement is not None:
                        created.append(replacement)
                        regrown += 1

        self.log.append("expand", node_id=node.node_id, tier=tier,
                        generated=len(candidates),
                        children=[c.node_id for c in created],
                        pruned=len([p for p in pruned_pairs]),
                        regrown=regrown)
        return created

    def _regrow(self, node: TreeNode, tier: int,
                retained: List[PruneEntry], kappa: float
                ) -> Optional[TreeNode]:
        negatives = tuple(descriptor_text_of(e) for e in retained)
        for attempt in range(self.config.regrow_max_attempts):
            context = self._context(node, negatives=negatives,
                                    nonce=attempt)
            descriptor = self.generator.regrow(tier, context,
                                               attempt=attempt)
            if descriptor is None:
                break
            if validate_descriptor(tier, descriptor):
                continue
            text = descriptor_canonical_text(tier, descriptor)
            candidate = tokenize_and_embed(text, self.config.wsmd)
            distant = all(
                fused_distance(candidate, e.candidate, kappa,
                               self.config.wsmd, self.cache).fused
                > self.config.epsilon
                for e in retained)
            if distant:
                child = self._new_node(node, tier, descriptor)
                retained.append(PruneEntry(candidate=candidate, q_value=None,
                                           creation_index=child.creation_index,
                                           payload=("node", child)))
                self.log.append("regrow", node_id=child.node_id,
                                parent=node.node_id, tier=tier,
                                attempts=attempt + 1, accepted=True)
                return child
        self.log.append("regrow", node_id=None, parent=node.node_id,
                        tier=tier,
                        attempts=self.config.regrow_max_attempts,
                        accepted=False)
        return None

    # -- rollout ---------------------------------------------------------------

    def select_path(self) -> List[TreeNode]:
        path = [self.root]
        node = self.root
        while node.live_children():
            node = select_child(node, self.config.exploration)
            path.append(node)
        return path

    def rollout_assembly(self, path: Sequence[TreeNode],
                         nonce: int) -> SolverAssembly:
        by_tier = {n.tier_level: n.descriptor for n in path
                   if n.tier_level > 0}
        leaf = path[-1]
        cur = leaf
        for tier in range(leaf.tier_level + 1, 4):
            context = self._context(cur, nonce=nonce)
            context = replace(context, tier=tier,
                              path_descriptors={t: d for t, d
                                                in by_tier.items()
                                                if t < tier},
                              fewshot_library=self._fewshot
                              if tier == 2 else "")
            descriptor = self.generator.generate(tier, context, 1)[0]
            by_tier[tier] = descriptor
        return assemble(by_tier[1], by_tier[2], by_tier[3])

    # -- main loop --------------------------------------------------------------

    def develop(self) -> RewardRecord:
        while self.eval_count < self.config.eval_budget:
            path = self.select_path()
            leaf = path[-1]
            if leaf.tier_level < 3:
                children = self.expand(leaf)
                live = [c for c in children if not c.pruned]
                if live:
                    path.append(min(live, key=lambda c: c.creation_index))
            assembly = self.rollout_assembly(path, nonce=self.eval_count)
            record = self.evaluate(assembly)
            backpropagate(path, record.reward)
            self.log.append("evaluate",
                            eval_index=record.eval_index,
                            node_path=[n.node_id for n in path],
                            assembly=text_fingerprint(
                                assembly.canonical_text),
                            reward=round(record.reward, 12),
                            mean_gap=(round(record.mean_gap, 12)
                                      if math.isfinite(record.mean_gap)
                                      else "inf"),
                            gaps=[(round(g, 12)
                                   if math.isfinite(g) else "inf")
                                  for g in record.per_instance_gaps])
        return self.best

    # -- persistence -------------------------------------------------------------

    def checkpoint(self) -> dict:
        nodes = []
        for node in self._nodes:
            nodes.append({
                "id": node.node_id,
                "parent": node.parent.node_id if node.parent else None,
                "tier": node.tier_level,
                "visits": node.visits,
                "q_mean": node.q_mean,
                "pruned": node.pruned,
                "creation_index": node.creation_index,
                "descriptor": (node.descriptor.to_dict()
                               if node.descriptor is not None else None),
            })
        return {
            "checkpoint_version": CHECKPOINT_VERSION,
            "eval_count": self.eval_count,
            "nodes": nodes,
            "best": None if self.best is None else {
                "assembly": self.best.assembly.to_dict(),
                "reward": self.best.reward,
                "mean_gap": self.best.mean_gap,
                "per_instance_gaps": list(self.best.per_instance_gaps),
                "eval_index": self.best.eval_index,
            },
            "references": self.references,
        }

    def restore(self, data: dict) -> None:
        if data.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError("checkpoint version mismatch")
        self._nodes = []
        by_id: Dict[int, TreeNode] = {}
        for row in sorted(data["nodes"], key=lambda r: r["id"]):
            parent = by_id.get(row["parent"]) if row["parent"] is not None \
                else None
            descriptor = None
            if row["descriptor"] is not None:
                descriptor = descriptor_from_dict(row["tier"],
                                                  row["descriptor"])
            node = TreeNode(node_id=row["id"], tier_level=row["tier"],
                            descriptor=descriptor, visits=row["visits"],
                            q_mean=row["q_mean"], pruned=row["pruned"],
                            creation_index=row["creation_index"],
                            parent=parent)
            by_id[node.node_id] = node
            self._nodes.append(node)
            if parent is not None:
                parent.children.append(node)
        self.root = by_id[0]
        self.eval_count = data["eval_count"]
        self.references = data["references"]
        best = data.get("best")
        if best is not None:
            self.best = RewardRecord(
                assembly=SolverAssembly.from_dict(best["assembly"]),
                mean_gap=best["mean_gap"],
                reward=best["reward"],
                per_instance_gaps=tuple(best["per_instance_gaps"]),
                eval_index=best["eval_index"])


def descriptor_text_of(entry: PruneEntry) -> str:
    kind, payload = entry.payload
    if kind == "node":
        return payload.canonical_text()
    # fresh payload is a bare descriptor; its tier follows from its type
    from .hierarchy import (DecompositionDescriptor, FrameworkDescriptor,
                            SubSolverDescriptor)
    tiers = {FrameworkDescriptor: 1, DecompositionDescriptor: 2,
             SubSolverDescriptor: 3}
    return descriptor_canonical_text(tiers[type(payload)], payload)


def develop(train_instances: Sequence[Instance], config: SearchConfig,
            generator, references: Optional[Dict[str, float]] = None
            ) -> Tuple[RewardRecord, MctsEngine]:
    """Run the full search; returns the best evaluated assembly and the
    engine (for its log, tree, and checkpoint)."""
    engine = MctsEngine(train_instances, config, generator, references)
    best = engine.develop()
    return best, engine
