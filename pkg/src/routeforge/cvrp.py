"""CVRP problem representation, instance I/O, cost evaluation and gaps.

Instances follow the TSPLIB keyword format (EUC_2D only). Node 0 is the
depot; customers are renumbered 1..N at parse time. Distances default to
the nearest-integer rounding used by the CVRPLib X benchmark so gaps are
comparable with published best-known costs; exact float distances are
available behind ``rounding_mode="exact-float"``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ROUND_NEAREST = "nearest-integer"
ROUND_EXACT = "exact-float"


class InstanceError(ValueError):
    """Raised for malformed or unsolvable instance files."""


@dataclass(frozen=True)
class Instance:
    """Immutable CVRP instance.

    coords holds customer coordinates (row i-1 for customer i); the depot
    sits in its own field. demands are indexed the same way.
    """

    name: str
    depot: np.ndarray            # shape (2,)
    coords: np.ndarray           # shape (N, 2)
    demands: np.ndarray          # shape (N,)
    capacity: float
    rounding_mode: str = ROUND_NEAREST
    bks: Optional[float] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        demands = np.asarray(self.demands, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "depot",
                           np.asarray(self.depot, dtype=np.float64).reshape(2))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "demands", demands)
        if coords.shape[0] != demands.shape[0]:
            raise InstanceError("coords and demands disagree on N")
        if coords.shape[0] < 1:
            raise InstanceError("instance needs at least one customer")
        if self.capacity <= 0:
            raise InstanceError("capacity must be positive")
        if self.rounding_mode not in (ROUND_NEAREST, ROUND_EXACT):
            raise InstanceError(f"unknown rounding mode {self.rounding_mode!r}")
        if np.any(demands < 0):
            raise InstanceError("negative demand")
        over = np.nonzero(demands > self.capacity)[0]
        if over.size:
            raise InstanceError(
                f"demand of customer {over[0] + 1} exceeds capacity "
                f"({demands[over[0]]:g} > {self.capacity:g})")
        self.coords.setflags(write=False)
        self.demands.setflags(write=False)
        self.depot.setflags(write=False)

    @property
    def n_customers(self) -> int:
        return self.coords.shape[0]

    def node_coords(self) -> np.ndarray:
        """(N+1, 2) coordinates with the depot as row 0."""
        if "node_coords" not in self._cache:
            self._cache["node_coords"] = np.vstack([self.depot[None, :],
                                                    self.coords])
        return self._cache["node_coords"]

    def node_demands(self) -> np.ndarray:
        """(N+1,) demands with demand 0 for the depot."""
        if "node_demands" not in self._cache:
            self._cache["node_demands"] = np.concatenate(
                [[0.0], self.demands])
        return self._cache["node_demands"]

    def distance_matrix(self) -> np.ndarray:
        """(N+1, N+1) symmetric distance matrix, cached."""
        if "dist" not in self._cache:
            pts = self.node_coords()
            diff = pts[:, None, :] - pts[None, :, :]
            d = np.sqrt((diff * diff).sum(axis=2))
            if self.rounding_mode == ROUND_NEAREST:
                d = np.floor(d + 0.5)
            d.setflags(write=False)
            self._cache["dist"] = d
        return self._cache["dist"]

    def distance(self, a: int, b: int) -> float:
        """Distance between node ids (0 = depot)."""
        n = self.n_customers
        if not (0 <= a <= n and 0 <= b <= n):
            raise InstanceError(f"invalid node id in ({a}, {b}); N={n}")
        return float(self.distance_matrix()[a, b])

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.name == other.name
                and np.array_equal(self.depot, other.depot)
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.demands, other.demands)
                and self.capacity == other.capacity
                and self.rounding_mode == other.rounding_mode
                and self.bks == other.bks)


@dataclass(frozen=True)
class Route:
    """Customer visit sequence; the depot is implicit at both ends."""

    sequence: Tuple[int, ...]

    def __post_init__(self):
        seq = tuple(int(c) for c in self.sequence)
        if not seq:
            raise ValueError("empty route")
        if len(set(seq)) != len(seq):
            raise ValueError("repeated customer within a route")
        object.__setattr__(self, "sequence", seq)


@dataclass(frozen=True)
class Solution:
    routes: Tuple[Route, ...]
    cost: float
    feasible: bool

    def customers(self) -> List[int]:
        out: List[int] = []
        for r in self.routes:
            out.extend(r.sequence)
        return out


@dataclass(frozen=True)
class Violation:
    kind: str        # overload | missing | duplicate | unknown-customer
    detail: str


@dataclass(frozen=True)
class GapReport:
    objective: float
    bks: float
    gap: float


def route_cost(instance: Instance, sequence: Sequence[int]) -> float:
    d = instance.distance_matrix()
    prev = 0
    total = 0.0
    for c in sequence:
        total += d[prev, c]
        prev = c
    total += d[prev, 0]
    return float(total)


def evaluate_solution(instance: Instance,
                      routes: Sequence[Sequence[int]],
                      ) -> Tuple[float, bool, List[Violation]]:
    """Recompute cost and feasibility of a set of routes.

    Returns (cost, feasible, violations); feasible iff every route load is
    within capacity and every customer is covered exactly once.
    """
    n = instance.n_customers
    demands = instance.node_demands()
    violations: List[Violation] = []
    seen = np.zeros(n + 1, dtype=np.int64)
    cost = 0.0
    for ri, seq in enumerate(routes):
        load = 0.0
        for c in seq:
            c = int(c)
            if not (1 <= c <= n):
                raise InstanceError(f"unknown customer id {c} in route {ri}")
            seen[c] += 1
            load += demands[c]
        cost += route_cost(instance, seq)
        if load > instance.capacity:
            violations.append(Violation(
                "overload",
                f"route {ri} load {load:g} exceeds capacity "
                f"{instance.capacity:g}"))
    for c in range(1, n + 1):
        if seen[c] == 0:
            violations.append(Violation("missing", f"customer {c} unserved"))
        elif seen[c] > 1:
            violations.append(Violation(
                "duplicate", f"customer {c} served {seen[c]} times"))
    return cost, not violations, violations


def make_solution(instance: Instance,
                  routes: Sequence[Sequence[int]]) -> Solution:
    """Build a Solution whose stored cost is the canonical recomputation."""
    cost, feasible, _ = evaluate_solution(instance, routes)
    return Solution(tuple(Route(tuple(int(c) for c in seq))
                          for seq in routes if len(seq)),
                    cost, feasible)


def gap(objective: float, bks: Optional[float]) -> float:
    if bks is None or bks <= 0:
        raise ValueError("gap needs a positive best-known cost")
    return (objective - bks) / bks


def gap_report(objective: float, bks: Optional[float]) -> GapReport:
    return GapReport(objective, float(bks), gap(objective, bks))


def format_gap(g: float) -> str:
    return f"{100.0 * g:.2f}%"


# ---------------------------------------------------------------------------
# TSPLIB-format parsing / serialization
# ---------------------------------------------------------------------------

_REQUIRED_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION")


def _parse_spec_value(line: str) -> str:
    return line.split(":", 1)[1].strip()


def parse_instance(text: str, name: Optional[str] = None,
                   rounding_mode: Optional[str] = None) -> Instance:
    """Parse TSPLIB-format instance text (EUC_2D).

    The depot from DEPOT_SECTION is separated out and the remaining nodes
    are renumbered 1..N in file order. Errors carry the offending line.
    """
    lines = text.splitlines()
    header: Dict[str, str] = {}
    coords: Dict[int, Tuple[float, float]] = {}
    demands: Dict[int, float] = {}
    depot_ids: List[int] = []
    section = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        upper = line.upper()
        if upper == "EOF":
            break
        if upper.startswith(("NODE_COORD_SECTION", "DEMAND_SECTION",
                             "DEPOT_SECTION")):
            section = upper.split()[0]
            continue
        if section is None:
            if ":" not in line:
                raise InstanceError(
                    f"line {lineno}: expected KEY : VALUE, got {line!r}")
            key = line.split(":", 1)[0].strip().upper()
            header[key] = _parse_spec_value(line)
            continue
        fields = line.split()
        try:
            if section == "NODE_COORD_SECTION":
                if len(fields) != 3:
                    raise ValueError("expected: id x y")
                coords[int(fields[0])] = (float(fields[1]), float(fields[2]))
            elif section == "DEMAND_SECTION":
                if len(fields) != 2:
                    raise ValueError("expected: id demand")
                demands[int(fields[0])] = float(fields[1])
            elif section == "DEPOT_SECTION":
                val = int(float(fields[0]))
                if val != -1:
                    depot_ids.append(val)
        except ValueError as exc:
            raise InstanceError(
                f"line {lineno}: malformed numeric field in {line!r} "
                f"({exc})") from None

    ewt = header.get("EDGE_WEIGHT_TYPE", "EUC_2D").upper()
    if ewt != "EUC_2D":
        raise InstanceError(f"unsupported EDGE_WEIGHT_TYPE {ewt!r}")
    if "CAPACITY" not in header:
        raise InstanceError("missing CAPACITY")
    if not coords:
        raise InstanceError("missing NODE_COORD_SECTION")
    if not demands:
        raise InstanceError("missing DEMAND_SECTION")
    if not depot_ids:
        raise InstanceError("missing DEPOT_SECTION")
    if len(depot_ids) > 1:
        raise InstanceError("multiple depots are not supported")
    capacity = float(header["CAPACITY"])
    depot_id = depot_ids[0]
    if depot_id not in coords:
        raise InstanceError(f"depot id {depot_id} has no coordinates")
    dim = header.get("DIMENSION")
    if dim is not None and int(dim) != len(coords):
        raise InstanceError(
            f"DIMENSION {dim} does not match {len(coords)} coordinate rows")

    customer_ids = sorted(i for i in coords if i != depot_id)
    cust_coords = []
    cust_demands = []
    for cid in customer_ids:
        if cid not in demands:
            raise InstanceError(f"node {cid} missing from DEMAND_SECTION")
        cust_coords.append(coords[cid])
        d = demands[cid]
        if d > capacity:
            raise InstanceError(
                f"demand exceeds capacity: node {cid} demands {d:g} "
                f"with CAPACITY {capacity:g}")
        cust_demands.append(d)
    if demands.get(depot_id, 0.0) != 0.0:
        raise InstanceError("depot must have zero demand")

    inst_name = name or header.get("NAME", "unnamed")
    mode = rounding_mode or ROUND_NEAREST
    return Instance(name=inst_name,
                    depot=np.array(coords[depot_id]),
                    coords=np.array(cust_coords),
                    demands=np.array(cust_demands),
                    capacity=capacity,
                    rounding_mode=mode)


def _fmt_num(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def serialize_instance(instance: Instance) -> str:
    """Inverse of parse_instance (parse(serialize(i)) == i)."""
    n = instance.n_customers
    out = [
        f"NAME : {instance.name}",
        "TYPE : CVRP",
        f"DIMENSION : {n + 1}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {_fmt_num(instance.capacity)}",
        "NODE_COORD_SECTION",
        f"1 {_fmt_num(instance.depot[0])} {_fmt_num(instance.depot[1])}",
    ]
    for i in range(n):
        out.append(f"{i + 2} {_fmt_num(instance.coords[i, 0])} "
                   f"{_fmt_num(instance.coords[i, 1])}")
    out.append("DEMAND_SECTION")
    out.append("1 0")
    for i in range(n):
        out.append(f"{i + 2} {_fmt_num(instance.demands[i])}")
    out.extend(["DEPOT_SECTION", "1", "-1", "EOF", ""])
    return "\n".join(out)


# ---------------------------------------------------------------------------
# solution files and BKS tables
# ---------------------------------------------------------------------------

def write_solution_text(solution: Solution) -> str:
    lines = []
    for k, route in enumerate(solution.routes, start=1):
        lines.append(f"Route #{k}: " + " ".join(str(c) for c in route.sequence))
    lines.append(f"Cost {_fmt_num(solution.cost)}")
    lines.append("")
    return "\n".join(lines)


def read_solution_text(instance: Instance, text: str) -> Solution:
    routes = []
    for line in text.splitlines():
        line = line.strip()
        m = re.match(r"Route #\d+:\s*(.*)", line)
        if m:
            seq = [int(tok) for tok in m.group(1).split()]
            routes.append(seq)
    return make_solution(instance, routes)


def parse_bks_table(text: str) -> Dict[str, float]:
    """Two-column sidecar table: instance_name cost."""
    table: Dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2:
            raise InstanceError(
                f"BKS table line {lineno}: expected 'name cost', got {line!r}")
        try:
            table[fields[0]] = float(fields[1])
        except ValueError:
            raise InstanceError(
                f"BKS table line {lineno}: bad cost {fields[1]!r}") from None
    return table


def euclidean(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
