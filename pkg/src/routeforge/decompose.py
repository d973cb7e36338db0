"""Decomposition strategies: partition an instance into CVRP subproblems.

Eleven strategies spanning route-based, centroid-based, angular, density
and spatial-recursive families. Every strategy returns a legitimate
partition (union = all customers, pairwise disjoint, none empty) and is a
pure function of (instance, elite, params). Route-based strategies treat
elite routes as atomic units and never split one across subproblems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cvrp import Instance, Solution
from .rng import child_rng

KMEANS_ITERATIONS = 50


@dataclass(frozen=True)
class SubProblem:
    customer_ids: Tuple[int, ...]     # sorted global ids
    local_instance: Instance
    id_map: np.ndarray                # id_map[local_id] = global_id; [0] = 0

    def to_global(self, local_routes: Sequence[Sequence[int]]
                  ) -> List[List[int]]:
        return [[int(self.id_map[c]) for c in seq] for seq in local_routes]


@dataclass(frozen=True)
class DecompositionParams:
    strategy_id: str
    target_size: Optional[int] = None      # desired customers per subproblem
    cluster_count: Optional[int] = None    # desired number of subproblems
    strategy_specific: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def violations(self) -> List[str]:
        out = []
        if self.strategy_id not in STRATEGY_IDS:
            out.append(f"unknown strategy_id {self.strategy_id!r}")
        if (self.target_size is None) == (self.cluster_count is None):
            out.append("exactly one of target_size / cluster_count")
        if self.target_size is not None and self.target_size < 2:
            out.append("target_size >= 2")
        if self.cluster_count is not None and self.cluster_count < 1:
            out.append("cluster_count >= 1")
        spec = _CATALOG.get(self.strategy_id)
        if spec:
            for key, val in self.strategy_specific.items():
                bounds = spec["params"].get(key)
                if bounds is None:
                    out.append(f"unknown parameter {key!r} for "
                               f"{self.strategy_id}")
                elif not (bounds["min"] <= float(val) <= bounds["max"]):
                    out.append(f"{key}={val} outside "
                               f"[{bounds['min']}, {bounds['max']}]")
        return out

    def validated(self) -> "DecompositionParams":
        bad = self.violations()
        if bad:
            raise ValueError("invalid DecompositionParams: " + "; ".join(bad))
        return self


def make_subproblem(instance: Instance, customer_ids: Sequence[int]
                    ) -> SubProblem:
    ids = sorted(int(c) for c in customer_ids)
    if not ids:
        raise ValueError("empty subproblem")
    idx = np.array(ids, dtype=np.int64) - 1
    local = Instance(name=f"{instance.name}/sub{ids[0]}",
                     depot=instance.depot.copy(),
                     coords=instance.coords[idx].copy(),
                     demands=instance.demands[idx].copy(),
                     capacity=instance.capacity,
                     rounding_mode=instance.rounding_mode)
    id_map = np.zeros(len(ids) + 1, dtype=np.int64)
    id_map[1:] = ids
    return SubProblem(customer_ids=tuple(ids), local_instance=local,
                      id_map=id_map)


def route_barycenter(route: Sequence[int], instance: Instance) -> np.ndarray:
    """Arithmetic mean of the route's customer coordinates (depot excluded)."""
    if len(route) == 0:
        raise ValueError("empty route")
    idx = np.asarray(route, dtype=np.int64) - 1
    return instance.coords[idx].mean(axis=0)


def validate_partition(instance: Instance,
                       subproblems: Sequence[SubProblem]) -> List[str]:
    """Empty list iff the subproblems legitimately partition the instance."""
    n = instance.n_customers
    violations: List[str] = []
    counts = np.zeros(n + 1, dtype=np.int64)
    for si, sp in enumerate(subproblems):
        if len(sp.customer_ids) == 0:
            violations.append(f"subproblem {si} is empty")
            continue
        if sp.local_instance.capacity != instance.capacity:
            violations.append(f"subproblem {si} altered capacity")
        if sp.local_instance.n_customers != len(sp.customer_ids):
            violations.append(f"subproblem {si} inconsistent local instance")
        if sorted(set(sp.customer_ids)) != list(sp.customer_ids):
            violations.append(f"subproblem {si} id list not sorted-unique")
        if not np.array_equal(np.array(sp.customer_ids),
                              sp.id_map[1:]):
            violations.append(f"subproblem {si} id_map mismatch")
        for c in sp.customer_ids:
            if not (1 <= c <= n):
                violations.append(f"subproblem {si} has invalid id {c}")
            else:
                counts[c] += 1
    for c in range(1, n + 1):
        if counts[c] == 0:
            violations.append(f"missing id {c}")
        elif counts[c] > 1:
            violations.append(f"duplicate id {c}")
    return violations


# ---------------------------------------------------------------------------
# geometric helpers
# ---------------------------------------------------------------------------

def _deduped_coords(coords: np.ndarray, rng: np.random.Generator
                    ) -> np.ndarray:
    """Jitter coincident points by a seed-derived epsilon so geometric
    strategies never face degenerate ties."""
    out = coords.astype(np.float64).copy()
    seen: Dict[Tuple[float, float], int] = {}
    for i in range(out.shape[0]):
        key = (out[i, 0], out[i, 1])
        if key in seen:
            out[i] += rng.normal(0.0, 1e-6, size=2)
        else:
            seen[key] = i
    return out


def _farthest_point_seeds(points: np.ndarray, k: int,
                          rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    seeds = [int(rng.integers(n))]
    dist = np.linalg.norm(points - points[seeds[0]], axis=1)
    while len(seeds) < k:
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(seeds, dtype=np.int64)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator
            ) -> np.ndarray:
    """Seeded k-means (farthest-point init, fixed iteration cap).
    Returns labels; assignment ties break toward the lower centroid index."""
    n = points.shape[0]
    k = min(k, n)
    centers = points[_farthest_point_seeds(points, k, rng)].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_ITERATIONS):
        d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_labels = np.argmin(d, axis=1)
        for c in range(k):
            if not (new_labels == c).any():
                stray = int(np.argmax(d[np.arange(n), new_labels]))
                new_labels[stray] = c
                centers[c] = points[stray]
        if np.array_equal(new_labels, labels) and _ > 0:
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return labels


def _labels_to_groups(labels: np.ndarray, k: int) -> List[List[int]]:
    groups = [[] for _ in range(k)]
    for i, lab in enumerate(labels):
        groups[int(lab)].append(i)
    return [g for g in groups if g]


# ---------------------------------------------------------------------------
# size balancing over atomic units
# ---------------------------------------------------------------------------

class _Units:
    """Atomic units of clustering: single customers, or whole elite routes."""

    def __init__(self, members: List[List[int]], instance: Instance):
        self.members = members
        self.centers = np.array([route_barycenter(m, instance)
                                 for m in members])
        self.sizes = np.array([len(m) for m in members], dtype=np.int64)

    def group_customers(self, group: Sequence[int]) -> List[int]:
        out: List[int] = []
        for u in group:
            out.extend(self.members[u])
        return sorted(out)

    def group_size(self, group: Sequence[int]) -> int:
        return int(self.sizes[list(group)].sum())

    def group_center(self, group: Sequence[int]) -> np.ndarray:
        idx = list(group)
        w = self.sizes[idx].astype(np.float64)
        return (self.centers[idx] * w[:, None]).sum(axis=0) / w.sum()


def _principal_axis(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered
    vals, vecs = np.linalg.eigh(cov)
    axis = vecs[:, int(np.argmax(vals))]
    if abs(axis[0]) < 1e-12 and abs(axis[1]) < 1e-12:
        return np.array([1.0, 0.0])
    return axis


def _split_group(units: _Units, group: List[int]) -> Tuple[List[int], List[int]]:
    pts = units.centers[group]
    axis = _principal_axis(pts)
    proj = pts @ axis
    order = sorted(range(len(group)), key=lambda i: (proj[i], group[i]))
    total = units.group_size(group)
    half: List[int] = []
    acc = 0
    for oi in order:
        if acc >= total / 2 and half:
            break
        half.append(group[oi])
        acc += int(units.sizes[group[oi]])
    left = half
    right = [u for u in group if u not in set(half)]
    if not right:
        right = [left.pop()]
    return left, right


def _balance_groups(units: _Units, groups: List[List[int]],
                    m: int) -> List[List[int]]:
    """Post-hoc merge/split so sizes land in [ceil(m/2), 2m], allowing one
    remainder group (and oversized single units, which cannot be split)."""
    lo = math.ceil(m / 2)
    hi = 2 * m
    queue = list(groups)
    sized: List[List[int]] = []
    while queue:
        g = queue.pop(0)
        if units.group_size(g) > hi and len(g) > 1:
            a, b = _split_group(units, g)
            queue.extend([a, b])
        else:
            sized.append(g)
    while True:
        under = [gi for gi, g in enumerate(sized)
                 if units.group_size(g) < lo]
        if len(under) < 2:
            break
        under.sort(key=lambda gi: (units.group_size(sized[gi]), gi))
        gi = under[0]
        center = units.group_center(sized[gi])
        best, best_d = -1, np.inf
        for gj in under[1:]:
            d = float(np.linalg.norm(units.group_center(sized[gj]) - center))
            if d < best_d:
                best, best_d = gj, d
        merged = sized[gi] + sized[best]
        sized = [g for idx, g in enumerate(sized) if idx not in (gi, best)]
        sized.append(merged)
    return sized


# ---------------------------------------------------------------------------
# the eleven strategies (groups of 0-based customer indices)
# ---------------------------------------------------------------------------

def _split_counts(n: int, k: int) -> List[int]:
    base, rem = divmod(n, k)
    return [base + 1 if i < rem else base for i in range(k)]


def _customer_kmeans(coords, k, rng, spec):
    return _labels_to_groups(_kmeans(coords, k, rng), k)


def _balanced_kmeans(coords, k, rng, spec, demands, capacity):
    labels = _kmeans(coords, k, rng)
    centers = np.array([coords[labels == c].mean(axis=0) for c in range(k)])
    target = demands.sum() / k * 1.05
    for _ in range(10):
        loads = np.zeros(k)
        new_labels = np.full(coords.shape[0], -1, dtype=np.int64)
        d = np.linalg.norm(coords[:, None, :] - centers[None, :, :], axis=2)
        for i in range(coords.shape[0]):       # id order resolves contention
            order = np.argsort(d[i], kind="stable")
            chosen = order[0]
            for c in order:
                if loads[c] + demands[i] <= target:
                    chosen = c
                    break
            new_labels[i] = chosen
            loads[chosen] += demands[i]
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            if (labels == c).any():
                centers[c] = coords[labels == c].mean(axis=0)
    return _labels_to_groups(labels, k)


def _polar_sweep(coords, k, rng, spec, depot):
    start = float(spec.get("start_angle", 0.0))
    ang = np.arctan2(coords[:, 1] - depot[1], coords[:, 0] - depot[0])
    ang = np.mod(ang - start, 2 * np.pi)
    order = sorted(range(coords.shape[0]), key=lambda i: (ang[i], i))
    groups = []
    at = 0
    for size in _split_counts(len(order), k):
        groups.append(order[at:at + size])
        at += size
    return [g for g in groups if g]


def _angular_radial(coords, k, rng, spec, depot):
    start = float(spec.get("start_angle", 0.0))
    sectors = max(1, int(round(math.sqrt(k))))
    per_sector = max(1, math.ceil(k / sectors))
    ang_groups = _polar_sweep(coords, sectors, rng,
                              {"start_angle": start}, depot)
    groups = []
    for g in ang_groups:
        radius = np.linalg.norm(coords[g] - depot, axis=1)
        order = sorted(range(len(g)), key=lambda i: (radius[i], g[i]))
        bands = min(per_sector, len(g))
        at = 0
        for size in _split_counts(len(g), bands):
            groups.append([g[i] for i in order[at:at + size]])
            at += size
    return [g for g in groups if g]


def _voronoi_seeds(coords, k, rng, spec):
    seeds = _farthest_point_seeds(coords, min(k, coords.shape[0]), rng)
    d = np.linalg.norm(coords[:, None, :] - coords[seeds][None, :, :], axis=2)
    labels = np.argmin(d, axis=1)
    return _labels_to_groups(labels, len(seeds))


def _density_grouping(coords, k, rng, spec):
    n = coords.shape[0]
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    radius = float(spec.get("radius_scale", 2.0)) * float(np.median(nn))
    min_pts = int(spec.get("min_pts", 3))
    neighbor_counts = (d <= radius).sum(axis=1)
    core = neighbor_counts >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    lab = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        stack = [i]
        labels[i] = lab
        while stack:
            cur = stack.pop()
            if not core[cur]:
                continue
            for j in np.nonzero(d[cur] <= radius)[0]:
                if labels[j] == -1:
                    labels[j] = lab
                    stack.append(int(j))
        lab += 1
    if lab == 0:
        return _customer_kmeans(coords, k, rng, spec)
    centers = np.array([coords[labels == c].mean(axis=0) for c in range(lab)])
    noise = np.nonzero(labels == -1)[0]
    for i in noise:   # noise joins the nearest cluster centroid
        labels[i] = int(np.argmin(np.linalg.norm(centers - coords[i], axis=1)))
    return _labels_to_groups(labels, lab)


def _spatial_grid(coords, k, rng, spec):
    gx = max(1, int(round(math.sqrt(k))))
    gy = max(1, math.ceil(k / gx))
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    cx = np.minimum((coords[:, 0] - lo[0]) / span[0] * gx, gx - 1e-9)
    cy = np.minimum((coords[:, 1] - lo[1]) / span[1] * gy, gy - 1e-9)
    cell = cx.astype(np.int64) * gy + cy.astype(np.int64)
    groups: Dict[int, List[int]] = {}
    for i, c in enumerate(cell):
        groups.setdefault(int(c), []).append(i)
    return [groups[c] for c in sorted(groups)]


def _agglomerative(coords, k, rng, spec):
    n = coords.shape[0]
    groups: List[List[int]] = [[i] for i in range(n)]
    centers = coords.copy()
    sizes = np.ones(n)
    alive = np.ones(n, dtype=bool)
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    count = n
    while count > k:
        flat = int(np.argmin(d))
        a, b = flat // n, flat % n
        merged = groups[a] + groups[b]
        w = sizes[a] + sizes[b]
        centers[a] = (centers[a] * sizes[a] + centers[b] * sizes[b]) / w
        sizes[a] = w
        groups[a] = merged
        alive[b] = False
        d[b, :] = np.inf
        d[:, b] = np.inf
        dd = np.linalg.norm(centers - centers[a], axis=1)
        dd[~alive] = np.inf
        dd[a] = np.inf
        d[a, :] = dd
        d[:, a] = dd
        count -= 1
    return [groups[i] for i in range(n) if alive[i]]


def _kd_median(coords, k, rng, spec):
    groups = [list(range(coords.shape[0]))]
    while len(groups) < k:
        gi = max(range(len(groups)), key=lambda i: (len(groups[i]), -i))
        g = groups[gi]
        if len(g) <= 1:
            break
        pts = coords[g]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = sorted(range(len(g)), key=lambda i: (pts[i, axis], g[i]))
        half = len(g) // 2
        left = [g[i] for i in order[:half]]
        right = [g[i] for i in order[half:]]
        groups[gi:gi + 1] = [left, right]
    return groups


def _route_groups(elite: Solution) -> List[List[int]]:
    return [list(r.sequence) for r in elite.routes]


# ---------------------------------------------------------------------------
# catalog and dispatch
# ---------------------------------------------------------------------------

_ANGLE = {"min": 0.0, "max": 2 * math.pi}

_CATALOG: Dict[str, dict] = {
    "route-barycenter-kmeans": {
        "requires_elite": True, "params": {},
        "summary": "k-means over elite route barycenters; routes stay atomic",
    },
    "customer-kmeans": {
        "requires_elite": False, "params": {},
        "summary": "plain k-means over customer coordinates",
    },
    "balanced-kmeans": {
        "requires_elite": False, "params": {},
        "summary": "k-means with demand-balanced assignment",
    },
    "polar-sweep": {
        "requires_elite": False, "params": {"start_angle": _ANGLE},
        "summary": "equal-count angular sectors swept around the depot",
    },
    "angular-radial": {
        "requires_elite": False, "params": {"start_angle": _ANGLE},
        "summary": "angular sectors split again by radius bands",
    },
    "voronoi-seeds": {
        "requires_elite": False, "params": {},
        "summary": "Voronoi cells of farthest-point seeds",
    },
    "density-grouping": {
        "requires_elite": False,
        "params": {"radius_scale": {"min": 1.0, "max": 4.0},
                   "min_pts": {"min": 2, "max": 8}},
        "summary": "density clusters; outliers join the nearest centroid",
    },
    "elite-route-grouping": {
        "requires_elite": True, "params": {},
        "summary": "random grouping of whole elite routes",
    },
    "spatial-grid": {
        "requires_elite": False, "params": {},
        "summary": "uniform grid cells over the bounding box",
    },
    "agglomerative-merge": {
        "requires_elite": False, "params": {},
        "summary": "nearest-pair merging until the group count is reached",
    },
    "kd-median": {
        "requires_elite": False, "params": {},
        "summary": "recursive median splits along the wider axis",
    },
}

STRATEGY_IDS = tuple(_CATALOG)


def strategy_catalog() -> List[dict]:
    """Machine-readable catalog (consumed by generator prompts and the
    mock sampler)."""
    out = []
    for sid, spec in _CATALOG.items():
        entry = {"id": sid,
                 "requires_elite": spec["requires_elite"],
                 "summary": spec["summary"],
                 "params": spec["params"],
                 "example": {"strategy_id": sid, "target_size": 100,
                             "strategy_specific": {
                                 key: round((b["min"] + b["max"]) / 2, 4)
                                 for key, b in spec["params"].items()},
                             "seed": 0}}
        out.append(entry)
    return out


def resolve_cluster_count(params: DecompositionParams, n: int) -> int:
    if params.cluster_count is not None:
        k = params.cluster_count
    else:
        k = math.ceil(n / params.target_size)
    return max(1, min(k, n))


def decompose(instance: Instance, elite: Optional[Solution],
              params: DecompositionParams) -> List[SubProblem]:
    params.validated()
    n = instance.n_customers
    if params.cluster_count is not None and params.cluster_count > n:
        raise ValueError(f"cluster_count {params.cluster_count} > N={n}")
    spec = dict(params.strategy_specific)
    sid = params.strategy_id
    requires_elite = _CATALOG[sid]["requires_elite"]
    if requires_elite and elite is None:
        raise ValueError(f"strategy {sid} requires an elite solution")
    k = resolve_cluster_count(params, n)
    rng = child_rng(params.seed, "decompose", sid, instance.name, k)
    coords = _deduped_coords(instance.coords, rng)

    if k == 1:
        return [make_subproblem(instance, range(1, n + 1))]

    if requires_elite:
        units = _Units(_route_groups(elite), instance)
        if sid == "route-barycenter-kmeans":
            kk = min(k, len(units.members))
            labels = _kmeans(units.centers, kk, rng)
            groups = _labels_to_groups(labels, kk)
        else:  # elite-route-grouping
            order = rng.permutation(len(units.members)).tolist()
            target = max(1.0, n / k)
            groups = []
            cur: List[int] = []
            acc = 0
            for u in order:
                cur.append(u)
                acc += int(units.sizes[u])
                if acc >= target and len(groups) < k - 1:
                    groups.append(cur)
                    cur = []
                    acc = 0
            if cur:
                groups.append(cur)
    else:
        units = _Units([[i + 1] for i in range(n)], instance)
        units.centers = coords   # customer units use the jittered coords
        if sid == "customer-kmeans":
            groups = _customer_kmeans(coords, k, rng, spec)
        elif sid == "balanced-kmeans":
            groups = _balanced_kmeans(coords, k, rng, spec,
                                      instance.demands, instance.capacity)
        elif sid == "polar-sweep":
            groups = _polar_sweep(coords, k, rng, spec, instance.depot)
        elif sid == "angular-radial":
            groups = _angular_radial(coords, k, rng, spec, instance.depot)
        elif sid == "voronoi-seeds":
            groups = _voronoi_seeds(coords, k, rng, spec)
        elif sid == "density-grouping":
            groups = _density_grouping(coords, k, rng, spec)
        elif sid == "spatial-grid":
            groups = _spatial_grid(coords, k, rng, spec)
        elif sid == "agglomerative-merge":
            groups = _agglomerative(coords, k, rng, spec)
        elif sid == "kd-median":
            groups = _kd_median(coords, k, rng, spec)
        else:  # pragma: no cover
            raise AssertionError(sid)

    if params.target_size is not None:
        groups = _balance_groups(units, groups, params.target_size)

    id_groups = [units.group_customers(g) for g in groups if g]
    id_groups.sort(key=lambda g: g[0])
    subs = [make_subproblem(instance, g) for g in id_groups]
    bad = validate_partition(instance, subs)
    if bad:  # pragma: no cover - internal guarantee
        raise AssertionError(f"illegitimate partition from {sid}: {bad[:3]}")
    return subs
