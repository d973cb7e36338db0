"""Seeded synthetic CVRP instance generator (uniform / clustered / mixed).

Coordinates are integers on a 1000x1000 grid so nearest-integer rounding
behaves exactly like the public benchmark files. Generation is a pure
function of the parameters, and the layout recipe is versioned so saved
experiment configs stay reproducible.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .cvrp import Instance
from .rng import child_rng

GENERATOR_VERSION = 1

LAYOUTS = ("uniform", "clustered", "mixed")
DEMAND_LAWS = ("unit", "uniform-small", "heavy-tail")

_GRID = 1000


def _cluster_points(rng: np.random.Generator, n: int) -> np.ndarray:
    k = int(rng.integers(3, 9))
    centers = rng.uniform(100, _GRID - 100, size=(k, 2))
    spread = rng.uniform(40, 120, size=k)
    which = rng.integers(0, k, size=n)
    pts = centers[which] + rng.normal(0.0, 1.0, size=(n, 2)) * spread[which][:, None]
    return np.clip(pts, 0, _GRID)


def _demands(rng: np.random.Generator, n: int, law: str) -> np.ndarray:
    if law == "unit":
        return np.ones(n)
    if law == "uniform-small":
        return rng.integers(1, 11, size=n).astype(np.float64)
    if law == "heavy-tail":
        # mostly light with a heavy tail, truncated well below capacity
        base = rng.integers(1, 11, size=n).astype(np.float64)
        heavy = rng.random(n) < 0.1
        base[heavy] = rng.integers(20, 51, size=int(heavy.sum()))
        return base
    raise ValueError(f"unknown demand law {law!r}")


def generate_instance(n: int, layout: str = "uniform",
                      demand_law: str = "uniform-small",
                      seed: int = 0,
                      capacity: Optional[float] = None,
                      name: Optional[str] = None) -> Instance:
    """One seeded instance; capacity defaults to ~10 customers per route."""
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = child_rng(seed, "synth", GENERATOR_VERSION, layout, demand_law, n)
    if layout == "uniform":
        pts = rng.uniform(0, _GRID, size=(n, 2))
    elif layout == "clustered":
        pts = _cluster_points(rng, n)
    else:
        n_uni = n // 2
        pts = np.vstack([rng.uniform(0, _GRID, size=(n_uni, 2)),
                         _cluster_points(rng, n - n_uni)])
    pts = np.floor(pts)
    depot = np.floor(rng.uniform(200, _GRID - 200, size=2))
    demands = _demands(rng, n, demand_law)
    if capacity is None:
        capacity = float(max(np.ceil(10.0 * demands.mean()), demands.max()))
    if name is None:
        name = f"synth-{layout}-n{n}-s{seed}"
    return Instance(name=name, depot=depot, coords=pts, demands=demands,
                    capacity=float(capacity))


def generate_training_set(count: int, n: int, layout: str,
                          demand_law: str = "uniform-small",
                          seed: int = 0) -> list:
    return [generate_instance(n, layout, demand_law,
                              seed=seed * 1000 + i,
                              name=f"train-{layout}-n{n}-{i}")
            for i in range(count)]
