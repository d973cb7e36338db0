"""Hot numeric kernels: giant-tour split and granular local search.

Both are written once in nopython-compatible style (plain loops over numpy
arrays) and compiled with numba's @njit when available. Setting the
environment variable ``ROUTEFORGE_NUMBA=0`` before import selects the pure
Python/NumPy fallback path instead; ``benchmarks/bench_kernels.py`` times
the two paths against each other.

Conventions shared by every kernel:

- node 0 is the depot; customers are 1..N,
- ``dist`` is the (N+1)x(N+1) symmetric distance matrix,
- ``demand`` is indexed by node id (demand[0] == 0),
- route state is a padded matrix ``routes[r, k]`` of customer ids with
  per-row lengths ``rlen[r]``; the depot is implicit at both ends.
"""

from __future__ import annotations

import os

import numpy as np

EPS = 1e-9

# toggle indices inside the operator flag vector
OP_RELOCATE = 0
OP_SWAP11 = 1
OP_SWAP22 = 2
OP_SWAP33 = 3
OP_TWO_OPT = 4
OP_TWO_OPT_STAR = 5
N_OPERATORS = 6


def numba_requested() -> bool:
    flag = os.environ.get("ROUTEFORGE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


def _identity_jit(func):
    return func


if numba_requested():
    try:
        from numba import njit as _njit

        def _jit(func):
            return _njit(cache=True)(func)

        NUMBA_ACTIVE = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _jit = _identity_jit
        NUMBA_ACTIVE = False
else:
    _jit = _identity_jit
    NUMBA_ACTIVE = False


# ---------------------------------------------------------------------------
# giant-tour split (shortest path over the contiguous-segmentation DAG)
# ---------------------------------------------------------------------------

def _split_dp(tour, dist, demand, capacity, penalty, pred, value):
    """O(N^2) DP over prefix positions; fills pred/value in place.

    value[j] is the cheapest penalized cost of serving tour[:j] with
    contiguous routes; pred[j] is the start index of the last route.
    """
    n = tour.shape[0]
    value[0] = 0.0
    for j in range(1, n + 1):
        value[j] = np.inf
        pred[j] = -1
    for i in range(n):
        if value[i] == np.inf:
            continue
        load = 0.0
        internal = 0.0
        prev = -1
        for j in range(i + 1, n + 1):
            c = tour[j - 1]
            load += demand[c]
            if prev >= 0:
                internal += dist[prev, c]
            prev = c
            route_cost = dist[0, tour[i]] + internal + dist[c, 0]
            excess = load - capacity
            if excess > 0.0:
                route_cost += penalty * excess
            total = value[i] + route_cost
            if total < value[j] - EPS:
                value[j] = total
                pred[j] = i
    return value[n]


# ---------------------------------------------------------------------------
# granular local search
# ---------------------------------------------------------------------------

def _excess_pen(load, capacity, penalty):
    e = load - capacity
    if e > 0.0:
        return penalty * e
    return 0.0


def _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r):
    total = 0.0
    cum[r, 0] = 0.0
    for k in range(rlen[r]):
        c = routes[r, k]
        route_of[c] = r
        pos_of[c] = k
        total += demand[c]
        cum[r, k + 1] = total
    loads[r] = total


def _remove_at(routes, rlen, r, pos):
    for k in range(pos, rlen[r] - 1):
        routes[r, k] = routes[r, k + 1]
    rlen[r] -= 1


def _insert_at(routes, rlen, r, pos, c):
    for k in range(rlen[r], pos, -1):
        routes[r, k] = routes[r, k - 1]
    routes[r, pos] = c
    rlen[r] += 1


def _prev_node(routes, r, pos):
    if pos > 0:
        return routes[r, pos - 1]
    return 0


def _next_node(routes, rlen, r, pos):
    if pos < rlen[r] - 1:
        return routes[r, pos + 1]
    return 0


def _try_relocate(u, v, after, routes, rlen, cum, loads, route_of, pos_of,
                  dist, demand, capacity, penalty):
    if u == v:
        return False
    r_u = route_of[u]
    r_v = route_of[v]
    i = pos_of[u]
    j = pos_of[v]
    p_u = _prev_node(routes, r_u, i)
    n_u = _next_node(routes, rlen, r_u, i)
    if after:
        if v == p_u:
            return False
        n_v = _next_node(routes, rlen, r_v, j)
        if n_v == u:
            return False
        gain_ins = dist[v, u] + dist[u, n_v] - dist[v, n_v]
        target = j + 1
    else:
        p_v = _prev_node(routes, r_v, j)
        if p_v == u:
            return False
        gain_ins = dist[p_v, u] + dist[u, v] - dist[p_v, v]
        target = j
    delta = dist[p_u, n_u] - dist[p_u, u] - dist[u, n_u] + gain_ins
    if r_u != r_v:
        q_u = demand[u]
        delta += (_excess_pen(loads[r_u] - q_u, capacity, penalty)
                  - _excess_pen(loads[r_u], capacity, penalty)
                  + _excess_pen(loads[r_v] + q_u, capacity, penalty)
                  - _excess_pen(loads[r_v], capacity, penalty))
    if delta >= -EPS:
        return False
    _remove_at(routes, rlen, r_u, i)
    if r_u == r_v and i < target:
        target -= 1
    _insert_at(routes, rlen, r_v, target, u)
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_u)
    if r_v != r_u:
        _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_v)
    return True


def _try_relocate_empty(u, routes, rlen, cum, loads, route_of, pos_of,
                        dist, demand, capacity, penalty, n_routes):
    """Move u into its own route. Returns the (possibly grown) route count,
    or -1 when the move was not applied."""
    r_u = route_of[u]
    if rlen[r_u] <= 1:
        return -1
    i = pos_of[u]
    p_u = _prev_node(routes, r_u, i)
    n_u = _next_node(routes, rlen, r_u, i)
    q_u = demand[u]
    delta = (dist[p_u, n_u] - dist[p_u, u] - dist[u, n_u]
             + dist[0, u] + dist[u, 0]
             + _excess_pen(loads[r_u] - q_u, capacity, penalty)
             - _excess_pen(loads[r_u], capacity, penalty)
             + _excess_pen(q_u, capacity, penalty))
    if delta >= -EPS:
        return -1
    target = -1
    for r in range(n_routes):
        if rlen[r] == 0:
            target = r
            break
    out = n_routes
    if target < 0:
        if n_routes >= routes.shape[0]:
            return -1
        target = n_routes
        out = n_routes + 1
    _remove_at(routes, rlen, r_u, i)
    routes[target, 0] = u
    rlen[target] = 1
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_u)
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, target)
    return out


def _try_swap11(u, v, routes, rlen, cum, loads, route_of, pos_of,
                dist, demand, capacity, penalty):
    if u == v:
        return False
    r_u = route_of[u]
    r_v = route_of[v]
    i = pos_of[u]
    j = pos_of[v]
    p_u = _prev_node(routes, r_u, i)
    n_u = _next_node(routes, rlen, r_u, i)
    p_v = _prev_node(routes, r_v, j)
    n_v = _next_node(routes, rlen, r_v, j)
    if r_u == r_v and n_u == v:
        delta = dist[p_u, v] + dist[u, n_v] - dist[p_u, u] - dist[v, n_v]
    elif r_u == r_v and n_v == u:
        delta = dist[p_v, u] + dist[v, n_u] - dist[p_v, v] - dist[u, n_u]
    else:
        delta = (dist[p_u, v] + dist[v, n_u] - dist[p_u, u] - dist[u, n_u]
                 + dist[p_v, u] + dist[u, n_v] - dist[p_v, v] - dist[v, n_v])
    if r_u != r_v:
        shift = demand[v] - demand[u]
        delta += (_excess_pen(loads[r_u] + shift, capacity, penalty)
                  - _excess_pen(loads[r_u], capacity, penalty)
                  + _excess_pen(loads[r_v] - shift, capacity, penalty)
                  - _excess_pen(loads[r_v], capacity, penalty))
    if delta >= -EPS:
        return False
    routes[r_u, i] = v
    routes[r_v, j] = u
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_u)
    if r_v != r_u:
        _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_v)
    return True


def _try_swap_seg(u, v, seg, routes, rlen, cum, loads, route_of, pos_of,
                  dist, demand, capacity, penalty):
    """Exchange the length-`seg` segments starting at u and v (orientation
    kept). Same-route exchanges require a gap of at least one node."""
    r_u = route_of[u]
    r_v = route_of[v]
    i = pos_of[u]
    j = pos_of[v]
    if i + seg > rlen[r_u] or j + seg > rlen[r_v]:
        return False
    if r_u == r_v and not (i + seg < j or j + seg < i):
        return False
    u_end = routes[r_u, i + seg - 1]
    v_end = routes[r_v, j + seg - 1]
    a = _prev_node(routes, r_u, i)
    b = _next_node(routes, rlen, r_u, i + seg - 1)
    c = _prev_node(routes, r_v, j)
    d = _next_node(routes, rlen, r_v, j + seg - 1)
    delta = (dist[a, v] + dist[v_end, b] - dist[a, u] - dist[u_end, b]
             + dist[c, u] + dist[u_end, d] - dist[c, v] - dist[v_end, d])
    if r_u != r_v:
        load_u = cum[r_u, i + seg] - cum[r_u, i]
        load_v = cum[r_v, j + seg] - cum[r_v, j]
        shift = load_v - load_u
        delta += (_excess_pen(loads[r_u] + shift, capacity, penalty)
                  - _excess_pen(loads[r_u], capacity, penalty)
                  + _excess_pen(loads[r_v] - shift, capacity, penalty)
                  - _excess_pen(loads[r_v], capacity, penalty))
    if delta >= -EPS:
        return False
    for k in range(seg):
        tmp = routes[r_u, i + k]
        routes[r_u, i + k] = routes[r_v, j + k]
        routes[r_v, j + k] = tmp
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_u)
    if r_v != r_u:
        _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_v)
    return True


def _try_two_opt(u, v, routes, rlen, cum, loads, route_of, pos_of,
                 dist, demand, capacity, penalty):
    r = route_of[u]
    if route_of[v] != r or u == v:
        return False
    i = pos_of[u]
    j = pos_of[v]
    if i < j:
        lo, hi = i, j
    else:
        lo, hi = j, i
    if hi - lo < 2:
        return False
    x = routes[r, lo]
    y = routes[r, hi]
    n_x = routes[r, lo + 1]
    n_y = _next_node(routes, rlen, r, hi)
    delta = dist[x, y] + dist[n_x, n_y] - dist[x, n_x] - dist[y, n_y]
    if delta >= -EPS:
        return False
    left = lo + 1
    right = hi
    while left < right:
        tmp = routes[r, left]
        routes[r, left] = routes[r, right]
        routes[r, right] = tmp
        left += 1
        right -= 1
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r)
    return True


def _try_two_opt_star(u, v, routes, rlen, cum, loads, route_of, pos_of,
                      dist, demand, capacity, penalty, scratch):
    r_u = route_of[u]
    r_v = route_of[v]
    if r_u == r_v:
        return False
    i = pos_of[u]
    j = pos_of[v]
    n_u = _next_node(routes, rlen, r_u, i)
    n_v = _next_node(routes, rlen, r_v, j)
    if n_u == 0 and n_v == 0:
        return False
    pre_u = cum[r_u, i + 1]
    pre_v = cum[r_v, j + 1]
    new_load_u = pre_u + loads[r_v] - pre_v
    new_load_v = pre_v + loads[r_u] - pre_u
    delta = (dist[u, n_v] + dist[v, n_u] - dist[u, n_u] - dist[v, n_v]
             + _excess_pen(new_load_u, capacity, penalty)
             + _excess_pen(new_load_v, capacity, penalty)
             - _excess_pen(loads[r_u], capacity, penalty)
             - _excess_pen(loads[r_v], capacity, penalty))
    if delta >= -EPS:
        return False
    tail_u = rlen[r_u] - (i + 1)
    tail_v = rlen[r_v] - (j + 1)
    for k in range(tail_u):
        scratch[k] = routes[r_u, i + 1 + k]
    for k in range(tail_v):
        routes[r_u, i + 1 + k] = routes[r_v, j + 1 + k]
    for k in range(tail_u):
        routes[r_v, j + 1 + k] = scratch[k]
    rlen[r_u] = i + 1 + tail_v
    rlen[r_v] = j + 1 + tail_u
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_u)
    _reindex_route(routes, rlen, cum, loads, route_of, pos_of, demand, r_v)
    return True


def _try_pair(u, v, routes, rlen, cum, loads, route_of, pos_of,
              dist, demand, capacity, penalty, toggles, scratch):
    if toggles[OP_RELOCATE]:
        if _try_relocate(u, v, True, routes, rlen, cum, loads, route_of,
                         pos_of, dist, demand, capacity, penalty):
            return True
        if _try_relocate(u, v, False, routes, rlen, cum, loads, route_of,
                         pos_of, dist, demand, capacity, penalty):
            return True
    if toggles[OP_SWAP11]:
        if _try_swap11(u, v, routes, rlen, cum, loads, route_of, pos_of,
                       dist, demand, capacity, penalty):
            return True
    if toggles[OP_SWAP22]:
        if _try_swap_seg(u, v, 2, routes, rlen, cum, loads, route_of,
                         pos_of, dist, demand, capacity, penalty):
            return True
    if toggles[OP_SWAP33]:
        if _try_swap_seg(u, v, 3, routes, rlen, cum, loads, route_of,
                         pos_of, dist, demand, capacity, penalty):
            return True
    if toggles[OP_TWO_OPT]:
        if _try_two_opt(u, v, routes, rlen, cum, loads, route_of, pos_of,
                        dist, demand, capacity, penalty):
            return True
    if toggles[OP_TWO_OPT_STAR]:
        if _try_two_opt_star(u, v, routes, rlen, cum, loads, route_of,
                             pos_of, dist, demand, capacity, penalty,
                             scratch):
            return True
    return False


def _ls_run(routes, rlen, cum, loads, route_of, pos_of, n_routes,
            dist, demand, capacity, penalty, neighbors, toggles, order,
            scratch, max_rounds):
    """First-improvement sweeps until no enabled move improves.

    Don't-look stamps skip (u, v) pairs whose routes have not changed
    since u's last completed scan; this does not alter the fixpoint, only
    the work to reach it. Returns the final route count; mutates all
    route-state arrays in place.
    """
    n = order.shape[0]
    last_tested = np.full(route_of.shape[0], -1, dtype=np.int64)
    route_stamp = np.zeros(routes.shape[0], dtype=np.int64)
    count = 0
    improved = True
    rounds = 0
    while improved and rounds < max_rounds:
        improved = False
        rounds += 1
        for oi in range(n):
            u = order[oi]
            r_u = route_of[u]
            if toggles[OP_RELOCATE] and route_stamp[r_u] > last_tested[u]:
                nr = _try_relocate_empty(u, routes, rlen, cum, loads,
                                         route_of, pos_of, dist, demand,
                                         capacity, penalty, n_routes)
                if nr >= 0:
                    n_routes = nr
                    count += 1
                    route_stamp[r_u] = count
                    route_stamp[route_of[u]] = count
                    improved = True
                    continue
            moved = False
            for gi in range(neighbors.shape[1]):
                v = neighbors[u, gi]
                if v <= 0:
                    break
                r_v = route_of[v]
                if (route_stamp[r_u] <= last_tested[u]
                        and route_stamp[r_v] <= last_tested[u]):
                    continue
                if _try_pair(u, v, routes, rlen, cum, loads, route_of,
                             pos_of, dist, demand, capacity, penalty,
                             toggles, scratch):
                    count += 1
                    route_stamp[r_u] = count
                    route_stamp[r_v] = count
                    route_stamp[route_of[u]] = count
                    route_stamp[route_of[v]] = count
                    moved = True
                    break
            if moved:
                improved = True
            else:
                last_tested[u] = count
    return n_routes


def _penalized_cost(routes, rlen, loads, n_routes, dist, capacity, penalty):
    total = 0.0
    for r in range(n_routes):
        if rlen[r] == 0:
            continue
        prev = 0
        for k in range(rlen[r]):
            c = routes[r, k]
            total += dist[prev, c]
            prev = c
        total += dist[prev, 0]
        total += _excess_pen(loads[r], capacity, penalty)
    return total


if NUMBA_ACTIVE:
    # rebind bottom-up so the outer kernels compile against the jitted
    # helpers (numba resolves globals at first call)
    _excess_pen = _jit(_excess_pen)
    _reindex_route = _jit(_reindex_route)
    _remove_at = _jit(_remove_at)
    _insert_at = _jit(_insert_at)
    _prev_node = _jit(_prev_node)
    _next_node = _jit(_next_node)
    _try_relocate = _jit(_try_relocate)
    _try_relocate_empty = _jit(_try_relocate_empty)
    _try_swap11 = _jit(_try_swap11)
    _try_swap_seg = _jit(_try_swap_seg)
    _try_two_opt = _jit(_try_two_opt)
    _try_two_opt_star = _jit(_try_two_opt_star)
    _try_pair = _jit(_try_pair)
    split_dp = _jit(_split_dp)
    ls_run = _jit(_ls_run)
    penalized_cost = _jit(_penalized_cost)
else:
    split_dp = _split_dp
    ls_run = _ls_run
    penalized_cost = _penalized_cost
