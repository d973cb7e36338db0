"""routeforge: automatic composition of decomposition-based CVRP solvers.

The library searches a three-tier space of solver components (overall
framework, decomposition strategy, sub-solver configuration) with a Monte
Carlo tree search whose expansion step prunes semantically redundant
candidates and regrows pruned slots from a pluggable component generator.
"""

__version__ = "0.1.0"

from .cvrp import Instance, Route, Solution, evaluate_solution, gap, parse_instance

__all__ = [
    "Instance",
    "Route",
    "Solution",
    "evaluate_solution",
    "gap",
    "parse_instance",
    "__version__",
]
