"""Fused semantic-structural distance between component candidates.

A candidate's canonical text is tokenized; each token gets a deterministic
hashed-trigram embedding (or one from an external embedding service) and
the token stream gets a row-stochastic structure matrix built from windowed
co-occurrence plus field->value adjacency. The distance combines

- d_wmd: debiased entropic optimal-transport cost between the two token
  embedding clouds (uniform weights, Euclidean ground cost), and
- d_smd: debiased entropic Gromov-Wasserstein discrepancy between the two
  structure matrices (squared-difference loss),

fused as D = (1-lambda) * d_wmd + lambda * kappa * d_smd, where kappa
rescales structural costs to the semantic cost range (batch mean ratio).
Self-distances vanish by debiasing; symmetry is exact because every pair
is computed in a canonical order.
"""

from __future__ import annotations

import logging
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .rng import text_fingerprint

logger = logging.getLogger(__name__)

EMBED_DIM = 64
_COOC_WINDOW = 3
_TOKEN_RE = re.compile(r"[a-z0-9]+")

HASHED_EMBEDDER = "hashed-trigram-64"
EXTERNAL_EMBEDDER = "external-service"


@dataclass(frozen=True)
class WsmdConfig:
    lam: float = 0.5                  # structural weight in [0, 1]
    epsilon: float = 0.5              # pruning threshold
    ot_regularization: float = 0.002
    ot_max_iterations: int = 2000
    gw_max_iterations: int = 50
    convergence_tolerance: float = 1e-10
    embedder: str = HASHED_EMBEDDER
    embedder_url: Optional[str] = None

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must be in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.ot_regularization <= 0 or self.convergence_tolerance <= 0:
            raise ValueError("regularization and tolerance must be positive")


@dataclass(frozen=True)
class TokenizedCandidate:
    tokens: Tuple[str, ...]
    embeddings: np.ndarray          # (n, d), unit-norm rows
    structure: np.ndarray           # (n, n), row-stochastic
    fingerprint: str

    @property
    def n(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class DistanceReport:
    d_wmd: float
    d_smd: float
    kappa: float
    fused: float


# ---------------------------------------------------------------------------
# tokenization and embedding
# ---------------------------------------------------------------------------

def _hashed_trigram_rows(tokens: Sequence[str]) -> np.ndarray:
    out = np.zeros((len(tokens), EMBED_DIM))
    for i, tok in enumerate(tokens):
        padded = f"^{tok}$"
        for k in range(max(1, len(padded) - 2)):
            tri = padded[k:k + 3]
            out[i, zlib.crc32(tri.encode()) % EMBED_DIM] += 1.0
    return out


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat / norms


def _external_embeddings(tokens: Sequence[str], url: str,
                         transport: Optional[Callable] = None) -> np.ndarray:
    """POST {"texts": [...]} -> {"embeddings": [[...], ...]}."""
    if transport is None:
        import requests

        def transport(payload):
            resp = requests.post(url, json=payload, timeout=10)
            resp.raise_for_status()
            return resp.json()

    data = transport({"texts": list(tokens)})
    emb = np.asarray(data["embeddings"], dtype=np.float64)
    if emb.shape[0] != len(tokens):
        raise ValueError("embedding count mismatch")
    return emb


def _structure_matrix(text: str, tokens: Sequence[str]) -> np.ndarray:
    n = len(tokens)
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, min(i + _COOC_WINDOW + 1, n)):
            a[i, j] += 1.0
            a[j, i] += 1.0
    # field->value adjacency: tokens left of '=' link to tokens right of it
    offset = 0
    for line in text.lower().splitlines():
        line_tokens = _TOKEN_RE.findall(line)
        if "=" in line and line_tokens:
            key_part = line.split("=", 1)[0]
            n_key = len(_TOKEN_RE.findall(key_part))
            for i in range(n_key):
                for j in range(n_key, len(line_tokens)):
                    a[offset + i, offset + j] += 1.0
                    a[offset + j, offset + i] += 1.0
        offset += len(line_tokens)
    for i in range(n):
        if a[i].sum() == 0:
            a[i, i] = 1.0
    return a / a.sum(axis=1, keepdims=True)


def tokenize_and_embed(text: str, config: WsmdConfig,
                       transport: Optional[Callable] = None
                       ) -> TokenizedCandidate:
    """Deterministic tokenization + embedding + structure extraction."""
    tokens = tuple(_TOKEN_RE.findall(text.lower()))
    if not tokens:
        raise ValueError("no tokens in candidate text")
    if config.embedder == EXTERNAL_EMBEDDER and config.embedder_url:
        try:
            emb = _external_embeddings(tokens, config.embedder_url, transport)
        except Exception as exc:
            logger.warning("external embedder failed (%s); falling back to "
                           "hashed trigrams", exc)
            emb = _hashed_trigram_rows(tokens)
    else:
        emb = _hashed_trigram_rows(tokens)
    emb = _normalize_rows(emb)
    structure = _structure_matrix(text, tokens)
    return TokenizedCandidate(tokens=tokens, embeddings=emb,
                              structure=structure,
                              fingerprint=text_fingerprint(text))


# ---------------------------------------------------------------------------
# entropic optimal transport
# ---------------------------------------------------------------------------

def _logsumexp(mat: np.ndarray, axis: int) -> np.ndarray:
    mx = mat.max(axis=axis, keepdims=True)
    out = np.log(np.exp(mat - mx).sum(axis=axis)) + mx.squeeze(axis)
    return out


def round_to_marginals(plan: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan exactly onto the uniform-marginal
    polytope (scale rows, scale columns, spread the residual)."""
    n, m = plan.shape
    p = np.full(n, 1.0 / n)
    q = np.full(m, 1.0 / m)
    row = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, p / np.maximum(row, 1e-300))[:, None]
    col = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, q / np.maximum(col, 1e-300))[None, :]
    err_p = p - plan.sum(axis=1)
    err_q = q - plan.sum(axis=0)
    total = err_p.sum()
    if total > 1e-300:
        plan = plan + np.outer(err_p, err_q) / total
    return plan


def sinkhorn_plan(cost: np.ndarray, reg: float, max_iterations: int,
                  tol: float, anneal: bool = True) -> Tuple[np.ndarray, bool]:
    """Entropic OT plan between uniform marginals; returns (plan, converged).

    Stabilized iterations (scaling vectors absorbed into log potentials
    before they overflow) under an annealed reg schedule, so small target
    regularizations stay stable and converge in far fewer iterations than
    plain Sinkhorn. Non-convergence returns the last iterate, flagged
    False.
    """
    n, m = cost.shape
    p = np.full(n, 1.0 / n)
    q = np.full(m, 1.0 / m)
    f = np.zeros(n)
    g = np.zeros(m)
    if anneal:
        schedule = [r for r in (0.1, 0.02) if r > reg * 1.5] + [reg]
    else:
        schedule = [reg]
    warm = max(10, max_iterations // 20)
    converged = False
    spent = 0
    for li, level in enumerate(schedule):
        last = li == len(schedule) - 1
        budget = (max_iterations - spent) if last else warm
        kernel = np.exp((-cost + f[:, None] + g[None, :]) / level)
        u = np.ones(n)
        v = np.ones(m)
        for it in range(budget):
            u = p / np.maximum(kernel @ v, 1e-300)
            v = q / np.maximum(kernel.T @ u, 1e-300)
            spent += 1
            um = u.max()
            vm = v.max()
            if um > 1e20 or vm > 1e20 or um < 1e-20 or vm < 1e-20:
                f = f + level * np.log(np.maximum(u, 1e-300))
                g = g + level * np.log(np.maximum(v, 1e-300))
                kernel = np.exp((-cost + f[:, None] + g[None, :]) / level)
                u = np.ones(n)
                v = np.ones(m)
                continue
            if it % 5 == 4 or it == budget - 1:
                plan = u[:, None] * kernel * v[None, :]
                err = (np.abs(plan.sum(axis=1) - p).max()
                       + np.abs(plan.sum(axis=0) - q).max())
                if err < tol:
                    if last:
                        converged = True
                    break
        f = f + level * np.log(np.maximum(u, 1e-300))
        g = g + level * np.log(np.maximum(v, 1e-300))
    plan = np.exp((-cost + f[:, None] + g[None, :]) / reg)
    return plan, converged


def _embedding_cost(a: TokenizedCandidate, b: TokenizedCandidate) -> np.ndarray:
    gram = a.embeddings @ b.embeddings.T     # rows are unit vectors
    return np.sqrt(np.maximum(2.0 - 2.0 * gram, 0.0))


def _raw_ot_cost(a: TokenizedCandidate, b: TokenizedCandidate,
                 config: WsmdConfig) -> Tuple[float, bool]:
    cost = _embedding_cost(a, b)
    plan, converged = sinkhorn_plan(cost, config.ot_regularization,
                                    config.ot_max_iterations,
                                    config.convergence_tolerance)
    plan = round_to_marginals(plan)    # cost of an exactly feasible plan
    return float((plan * cost).sum()), converged


def transport_plan(a: TokenizedCandidate, b: TokenizedCandidate,
                   config: WsmdConfig) -> np.ndarray:
    """The entropic OT plan used inside wmd (exposed for diagnostics)."""
    plan, _ = sinkhorn_plan(_embedding_cost(a, b), config.ot_regularization,
                            config.ot_max_iterations,
                            config.convergence_tolerance)
    return plan


def _ordered(a: TokenizedCandidate, b: TokenizedCandidate):
    """Canonical pair order: makes every pairwise distance exactly symmetric."""
    if (a.n, a.fingerprint) <= (b.n, b.fingerprint):
        return a, b
    return b, a


# raw self costs are pure in (candidate, config); cache them for batch reuse
_OT_SELF_CACHE: Dict[Tuple[str, "WsmdConfig"], Tuple[float, bool]] = {}
_GW_SELF_CACHE: Dict[Tuple[str, "WsmdConfig"], Tuple[float, bool]] = {}


def _ot_self(a: TokenizedCandidate, config: WsmdConfig) -> Tuple[float, bool]:
    key = (a.fingerprint, config)
    if key not in _OT_SELF_CACHE:
        _OT_SELF_CACHE[key] = _raw_ot_cost(a, a, config)
    return _OT_SELF_CACHE[key]


def _gw_self(a: TokenizedCandidate, config: WsmdConfig) -> Tuple[float, bool]:
    key = (a.fingerprint, config)
    if key not in _GW_SELF_CACHE:
        _GW_SELF_CACHE[key] = _raw_gw_cost(a.structure, a.structure, config)
    return _GW_SELF_CACHE[key]


def wmd_detailed(a: TokenizedCandidate, b: TokenizedCandidate,
                 config: WsmdConfig) -> Tuple[float, bool]:
    """Debiased entropic transport cost between token embedding clouds."""
    if a.fingerprint == b.fingerprint:
        return 0.0, True          # debiasing cancels identical clouds exactly
    a, b = _ordered(a, b)
    ab, ok1 = _raw_ot_cost(a, b, config)
    aa, ok2 = _ot_self(a, config)
    bb, ok3 = _ot_self(b, config)
    return max(0.0, ab - 0.5 * (aa + bb)), ok1 and ok2 and ok3


def wmd(a: TokenizedCandidate, b: TokenizedCandidate,
        config: WsmdConfig) -> float:
    value, converged = wmd_detailed(a, b, config)
    if not converged:
        # last iterate is rounded onto the marginal polytope, so the value
        # is still the cost of a feasible plan
        logger.debug("sinkhorn did not reach tolerance; using last iterate")
    return value


# ---------------------------------------------------------------------------
# entropic Gromov-Wasserstein
# ---------------------------------------------------------------------------

def _monotone_coupling(n: int, m: int) -> np.ndarray:
    """Index-order coupling of two uniform distributions (interval overlap)."""
    t = np.zeros((n, m))
    for i in range(n):
        lo_i, hi_i = i / n, (i + 1) / n
        for j in range(m):
            lo_j, hi_j = j / m, (j + 1) / m
            t[i, j] = max(0.0, min(hi_i, hi_j) - max(lo_i, lo_j))
    return t


def _gw_value(const_c, h1, h2, plan) -> float:
    return float(((const_c - h1 @ plan @ h2.T) * plan).sum())


_GW_REG_SCHEDULE = (0.25, 0.1, 0.04, 0.015, 0.005)


def _gw_descent(const_c, h1, h2, plan, config) -> Tuple[float, bool]:
    """Mirror descent with annealed regularization.

    The gradient is rescaled to mean 1 before the entropic projection and
    the reg anneals downward, so the plan follows the smoothed solution
    path into interior minima before the sharp final levels lock onto the
    nearest basin. Every iterate is rounded exactly onto the marginal
    polytope before its objective is recorded, so the reported minimum
    always belongs to a feasible coupling.
    """
    best = _gw_value(const_c, h1, h2, round_to_marginals(plan))
    converged = True
    inner_iters = min(config.ot_max_iterations, 150)
    inner_tol = max(config.convergence_tolerance, 1e-6)
    final_reg = max(config.ot_regularization, 0.002)
    schedule = ([r for r in _GW_REG_SCHEDULE if r > final_reg * 1.5]
                + [final_reg])
    per_level = max(3, config.gw_max_iterations // len(schedule))
    for reg in schedule:
        settled = False
        for _ in range(per_level):
            tens = const_c - h1 @ plan @ h2.T
            scale = max(float(np.abs(tens).mean()), 1e-12)
            new_plan, _ = sinkhorn_plan(tens / scale, reg,
                                        inner_iters, inner_tol,
                                        anneal=False)
            shift = float(np.abs(new_plan - plan).max())
            plan = new_plan
            best = min(best, _gw_value(const_c, h1, h2,
                                       round_to_marginals(plan)))
            if shift < 1e-7:
                settled = True
                break
        converged = settled
    return best, converged


def _raw_gw_cost(a: np.ndarray, b: np.ndarray,
                 config: WsmdConfig) -> Tuple[float, bool]:
    """Entropic GW with squared-difference loss, uniform marginals.

    The descent is non-convex, so it runs from two deterministic starts
    (monotone and anti-monotone index couplings, each blended with the
    product measure) and keeps the better value. The inner Sinkhorn reg is
    scaled by the current gradient magnitude so the blur tracks the cost
    scale.
    """
    n, m = a.shape[0], b.shape[0]
    p = np.full(n, 1.0 / n)
    q = np.full(m, 1.0 / m)
    const_c = ((a * a) @ p)[:, None] + (q @ (b * b).T)[None, :]
    h1, h2 = a, 2.0 * b
    product = np.outer(p, q)
    mono = _monotone_coupling(n, m)
    # the uniform coupling is a saddle for every row-stochastic structure
    # pair (constant row means make the gradient additive there), so the
    # vertex couplings are scored outright before the descents run
    best = min(_gw_value(const_c, h1, h2, product),
               _gw_value(const_c, h1, h2, mono),
               _gw_value(const_c, h1, h2, mono[:, ::-1]))
    converged = True
    for init in (0.5 * product + 0.5 * mono,
                 0.5 * product + 0.5 * mono[:, ::-1]):
        value, ok = _gw_descent(const_c, h1, h2, init, config)
        converged = converged and ok
        best = min(best, value)
    return best, converged


def smd_detailed(a: TokenizedCandidate, b: TokenizedCandidate,
                 config: WsmdConfig) -> Tuple[float, bool]:
    """Debiased entropic GW discrepancy between structure matrices."""
    if a.fingerprint == b.fingerprint:
        return 0.0, True
    a, b = _ordered(a, b)
    ab, ok1 = _raw_gw_cost(a.structure, b.structure, config)
    aa, ok2 = _gw_self(a, config)
    bb, ok3 = _gw_self(b, config)
    return max(0.0, ab - 0.5 * (aa + bb)), ok1 and ok2 and ok3


def smd(a: TokenizedCandidate, b: TokenizedCandidate,
        config: WsmdConfig) -> float:
    value, converged = smd_detailed(a, b, config)
    if not converged:
        logger.debug("gromov-wasserstein loop did not settle; "
                     "using best feasible iterate")
    return value


# ---------------------------------------------------------------------------
# fusion, batch normalization and pruning
# ---------------------------------------------------------------------------

def kappa_from_costs(wmds: Sequence[float], smds: Sequence[float]) -> float:
    """Ratio of mean semantic to mean structural cost; 1.0 on degenerate
    batches."""
    if len(smds) == 0:
        return 1.0
    ms = float(np.mean(smds))
    if ms < 1e-12:
        return 1.0
    return float(np.mean(wmds)) / ms


def fused_distance(a: TokenizedCandidate, b: TokenizedCandidate,
                   kappa: float, config: WsmdConfig,
                   cache: Optional["PairwiseCache"] = None) -> DistanceReport:
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if cache is not None:
        d_w, d_s = cache.costs(a, b, config)
    else:
        d_w = wmd(a, b, config)
        d_s = smd(a, b, config)
    fused = (1.0 - config.lam) * d_w + config.lam * kappa * d_s
    return DistanceReport(d_wmd=d_w, d_smd=d_s, kappa=kappa, fused=fused)


class PairwiseCache:
    """Memoizes (d_wmd, d_smd) per candidate pair; distances are pure, so
    entries stay valid for the life of a search."""

    def __init__(self):
        self._store: Dict[Tuple[str, str], Tuple[float, float]] = {}

    def costs(self, a: TokenizedCandidate, b: TokenizedCandidate,
              config: WsmdConfig) -> Tuple[float, float]:
        if a.fingerprint == b.fingerprint:
            return 0.0, 0.0
        key = tuple(sorted((a.fingerprint, b.fingerprint)))
        if key not in self._store:
            self._store[key] = (wmd(a, b, config), smd(a, b, config))
        return self._store[key]


def batch_kappa(candidates: Sequence[TokenizedCandidate], config: WsmdConfig,
                cache: Optional[PairwiseCache] = None) -> float:
    """Kappa over every unordered pair in the batch."""
    cache = cache or PairwiseCache()
    wmds: List[float] = []
    smds: List[float] = []
    for i in range(len(candidates)):
        for j in range(i + 1, len(candidates)):
            d_w, d_s = cache.costs(candidates[i], candidates[j], config)
            wmds.append(d_w)
            smds.append(d_s)
    return kappa_from_costs(wmds, smds)


def kappa(pairs: Sequence[Tuple[TokenizedCandidate, TokenizedCandidate]],
          config: WsmdConfig,
          cache: Optional[PairwiseCache] = None) -> float:
    """Kappa over an explicit list of candidate pairs."""
    cache = cache or PairwiseCache()
    wmds = []
    smds = []
    for a, b in pairs:
        d_w, d_s = cache.costs(a, b, config)
        wmds.append(d_w)
        smds.append(d_s)
    return kappa_from_costs(wmds, smds)


@dataclass
class PruneEntry:
    candidate: TokenizedCandidate
    q_value: Optional[float]
    creation_index: int
    payload: object = None          # caller-owned (descriptor, node, ...)


@dataclass(frozen=True)
class PrunedPair:
    loser: PruneEntry
    winner: PruneEntry
    report: DistanceReport


def _duel(a: PruneEntry, b: PruneEntry) -> Tuple[PruneEntry, PruneEntry]:
    """Returns (winner, loser): higher Q wins; an evaluated entry beats an
    unevaluated one; otherwise the earlier creation index survives."""
    if a.q_value is not None and b.q_value is not None:
        if a.q_value != b.q_value:
            return (a, b) if a.q_value > b.q_value else (b, a)
        return (a, b) if a.creation_index <= b.creation_index else (b, a)
    if a.q_value is not None:
        return a, b
    if b.q_value is not None:
        return b, a
    return (a, b) if a.creation_index <= b.creation_index else (b, a)


def prune_set(entries: Sequence[PruneEntry], epsilon: float, kappa: float,
              config: WsmdConfig,
              cache: Optional[PairwiseCache] = None
              ) -> Tuple[List[PruneEntry], List[PrunedPair]]:
    """Greedy pass in creation order; candidates within epsilon of a
    retained one resolve by estimated value. No two retained entries end
    up within epsilon of each other."""
    cache = cache or PairwiseCache()
    ordered = sorted(entries, key=lambda e: e.creation_index)
    retained: List[PruneEntry] = []
    pruned: List[PrunedPair] = []
    for entry in ordered:
        alive = True
        for existing in list(retained):
            report = fused_distance(entry.candidate, existing.candidate,
                                    kappa, config, cache)
            if report.fused <= epsilon:
                winner, loser = _duel(existing, entry)
                pruned.append(PrunedPair(loser=loser, winner=winner,
                                         report=report))
                if loser is entry:
                    alive = False
                    break
                retained.remove(existing)
        if alive:
            retained.append(entry)
    return retained, pruned
