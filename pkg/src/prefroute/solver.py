"""Maximum-likelihood CVRP.

The routing problem is solved over arc costs ``c[s, r] = -log(P[s, r] + eps)``
on the depot plus the day's active stops. Feasible routings use exactly
``vehicle_count`` nonempty depot-anchored tours, visit every active stop once
and respect the vehicle capacity.

Internally everything works on a *local* index: position 0 is the depot and
positions ``1..n`` are ``inst.active_stops`` in increasing order.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .core import DEPOT, Routing, RoutingInstance, validate_routing
from .markov import distance_log_probabilities

EPS = 1e-6
EXACT_MAX_STOPS = 12
BRUTE_FORCE_MAX_STOPS = 8
WARM_START_ITERS = 20  # LNS rounds spent on the exact backend's incumbent
_TOL = 1e-10

Backend = Literal["exact", "heuristic", "auto"]


class InfeasibleError(RuntimeError):
    """No routing satisfies the fleet and capacity constraints."""


@dataclass
class SolveReport:
    routing: Routing
    objective: float
    optimal: bool
    nodes_explored: int
    wall_time: float
    backend: str
    distance_km: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "routes": [list(t) for t in self.routing.tours],
            "objective": self.objective,
            "optimal": self.optimal,
            "nodes_explored": self.nodes_explored,
            "wall_time": self.wall_time,
            "backend": self.backend,
        }
        if self.distance_km is not None:
            out["distance_km"] = self.distance_km
        return out


def cost_matrix(p: np.ndarray, inst: RoutingInstance, eps: float = EPS) -> np.ndarray:
    """Local ``-log(p + eps)`` costs over ``inst.nodes`` with ``inf`` on the diagonal."""
    nodes = np.asarray(inst.nodes)
    if nodes.max() >= p.shape[0]:
        raise ValueError(f"transition matrix of size {p.shape[0]} does not cover stop {nodes.max()}")
    sub = np.asarray(p, dtype=float)[np.ix_(nodes, nodes)]
    with np.errstate(divide="ignore"):
        c = -np.log(sub + eps)
    np.fill_diagonal(c, np.inf)
    return c


def check_stochastic(p: np.ndarray, inst: RoutingInstance, tol: float = 1e-6) -> None:
    rows = np.asarray(p)[list(inst.nodes)]
    if np.any(rows < -tol) or not np.allclose(rows.sum(axis=1), 1.0, atol=tol):
        raise ValueError("transition matrix rows for the instance's stops are not stochastic")


def routing_cost(c: np.ndarray, inst: RoutingInstance, x: Routing) -> float:
    index = {v: i for i, v in enumerate(inst.nodes)}
    return float(sum(c[index[s], index[r]] for s, r in x.arcs))


def routing_distance(d: np.ndarray, x: Routing) -> float:
    return float(sum(d[s, r] for s, r in x.arcs))


class _Local:
    """Dense local view of one instance."""

    def __init__(self, c: np.ndarray, inst: RoutingInstance):
        self.inst = inst
        self.nodes = inst.nodes
        self.n = inst.n_stops
        self.c = np.asarray(c, dtype=float)
        if self.c.shape != (self.n + 1, self.n + 1):
            raise ValueError(
                f"cost matrix shape {self.c.shape} does not match {self.n} active stops"
            )
        off = ~np.eye(self.n + 1, dtype=bool)
        if not np.all(np.isfinite(self.c[off])):
            raise ValueError("cost matrix has non-finite off-diagonal entries")
        self.q = np.array([0] + [inst.demand(s) for s in inst.active_stops], dtype=int)
        self.Q = inst.capacity
        self.m = inst.vehicle_count

    def check_feasible(self) -> None:
        if self.m > self.n:
            raise InfeasibleError(
                f"{self.m} vehicles but only {self.n} stops; tours cannot be empty"
            )
        if self.q.max(initial=0) > self.Q:
            raise InfeasibleError("a single demand exceeds the vehicle capacity")
        if self.q.sum() > self.m * self.Q:
            raise InfeasibleError(
                f"total demand {self.q.sum()} exceeds fleet capacity {self.m * self.Q}"
            )

    def routing(self, tours: Sequence[Sequence[int]]) -> Routing:
        return Routing.from_tours([[self.nodes[i] for i in t] for t in tours])

    def cost(self, tours: Sequence[Sequence[int]]) -> float:
        total = 0.0
        for t in tours:
            path = [0, *t, 0]
            total += float(self.c[path[:-1], path[1:]].sum())
        return total


def _count(mask: int) -> int:
    return bin(mask).count("1")


def _canonical(tours) -> tuple[tuple[int, ...], ...]:
    return tuple(sorted(tuple(t) for t in tours))


def _flatten(tours) -> tuple[int, ...]:
    """Tour list as one sequence with depot separators; orders like the tour list."""
    out: list[int] = []
    for t in _canonical(tours):
        out.extend(t)
        out.append(0)
    return tuple(out)


# ---------------------------------------------------------------- exact backend


def _branch_and_bound(loc: _Local, incumbent=None, node_limit: int | None = None):
    """Depth-first branch-and-bound over successor choices.

    Tours are built one at a time in increasing order of their first stop,
    which removes the symmetry between vehicles. A partial routing carries the
    load of its open tour, so a tour can only grow while the load stays within
    capacity and any closed tour is anchored at the depot; subtours cannot
    form. The bound adds, for every node still needing an out-arc, its cheapest
    arc into the nodes it may still reach.

    Returns ``(tours, cost, nodes, complete)``.
    """
    n, m, Q = loc.n, loc.m, loc.Q
    c = loc.c.tolist()
    q = loc.q.tolist()
    order = [sorted((j for j in range(n + 1) if j != i), key=lambda j: (c[i][j], j))
             for i in range(n + 1)]

    best_cost = math.inf
    best_seq: tuple[int, ...] | None = None
    if incumbent is not None:
        best_cost = loc.cost(incumbent)
        best_seq = _flatten(incumbent)

    path: list[int] = []
    memo: dict[tuple, list] = {}
    stats = {"nodes": 0, "complete": True}

    order_in = [sorted((i for i in range(n + 1) if i != j), key=lambda i: (c[i][j], i))
                for j in range(n + 1)]

    def lower_bound(cur: int, U: int, k: int, first: int) -> float:
        # Later tours start above ``first``; every remaining node needs one
        # out-arc and one in-arc. Take the larger of the two relaxations.
        need = m - k
        starts = U >> (first + 1) << (first + 1)
        out_lb = 0.0
        in_lb = 0.0
        if cur != 0:
            for j in order[cur]:
                if j == 0 or (U >> j) & 1:
                    out_lb += c[cur][j]
                    break
        if need > 0:
            got = 0
            for j in order[0]:
                if (starts >> j) & 1:
                    out_lb += c[0][j]
                    got += 1
                    if got == need:
                        break
        returns = need + (cur != 0)
        if returns:
            got = 0
            for i in order_in[0]:
                if (U >> i) & 1 or (i == cur and cur != 0):
                    in_lb += c[i][0]
                    got += 1
                    if got == returns:
                        break
        u = U
        while u:
            low = u & -u
            i = low.bit_length() - 1
            u ^= low
            for j in order[i]:
                if j == 0 or (U >> j) & 1:
                    out_lb += c[i][j]
                    break
            for h in order_in[i]:
                if (U >> h) & 1 or (h == cur and cur != 0) or (h == 0 and need > 0 and i > first):
                    in_lb += c[h][i]
                    break
        return out_lb if out_lb > in_lb else in_lb

    def prefix_is_larger() -> bool:
        if best_seq is None:
            return False
        return tuple(path) > best_seq[: len(path)]

    def dfs(cur: int, U: int, nu: int, rem: int, load: int, k: int, first: int, g: float):
        nonlocal best_cost, best_seq
        stats["nodes"] += 1
        if node_limit is not None and stats["nodes"] > node_limit:
            stats["complete"] = False
            return
        if U == 0:
            if k == m and cur != 0:
                total = g + c[cur][0]
                seq = tuple(path) + (0,)
                if total < best_cost - _TOL or (
                    total <= best_cost + _TOL and (best_seq is None or seq < best_seq)
                ):
                    best_cost, best_seq = total, seq
            return
        if _count(U >> (first + 1)) < m - k:
            return
        lb = g + lower_bound(cur, U, k, first)
        if lb > best_cost + _TOL:
            return
        if lb >= best_cost - _TOL and prefix_is_larger():
            return
        # A state is dominated by an earlier one at the same node with the same
        # stops left that had no later tour-start bound, no more load and a
        # strictly lower cost.
        key = (cur, U, k)
        front = memo.get(key)
        if front is None:
            memo[key] = [(first, load, g)]
        else:
            for f0, l0, g0 in front:
                if f0 <= first and l0 <= load and g0 < g - _TOL:
                    return
            front[:] = [e for e in front if not (first <= e[0] and load <= e[1] and g <= e[2])]
            front.append((first, load, g))

        if cur == 0:
            left = m - k - 1
            for f in order[0]:
                if not (U >> f) & 1 or f < first:
                    continue
                if nu - 1 < left or rem - q[f] > (Q - q[f]) + left * Q:
                    continue
                path.append(f)
                dfs(f, U & ~(1 << f), nu - 1, rem - q[f], q[f], k + 1, f, g + c[0][f])
                path.pop()
            return

        left = m - k
        for j in order[cur]:
            if j == 0:
                if left >= 1 and nu >= left and rem <= left * Q:
                    path.append(0)
                    dfs(0, U, nu, rem, 0, k, first, g + c[cur][0])
                    path.pop()
            elif (U >> j) & 1 and load + q[j] <= Q:
                if nu - 1 < left or rem - q[j] > (Q - load - q[j]) + left * Q:
                    continue
                path.append(j)
                dfs(j, U & ~(1 << j), nu - 1, rem - q[j], load + q[j], k, first, g + c[cur][j])
                path.pop()

    full = ((1 << (n + 1)) - 1) & ~1
    dfs(0, full, n, int(sum(q)), 0, 0, 0, 0.0)
    if best_seq is None:
        return None, math.inf, stats["nodes"], stats["complete"]
    tours, cur_t = [], []
    for v in best_seq:
        if v == 0:
            tours.append(tuple(cur_t))
            cur_t = []
        else:
            cur_t.append(v)
    return tours, best_cost, stats["nodes"], stats["complete"]


# ------------------------------------------------------------ heuristic backend


def _greedy(loc: _Local, rng: np.random.Generator | None = None, noise: float = 0.0):
    """Extend tour ends with the most probable feasible successor.

    The ``m`` tours are seeded with the most probable depot successors and
    grown in parallel, so every tour is nonempty. Returns None when the
    greedy packing strands a stop.
    """
    n, m, Q = loc.n, loc.m, loc.Q
    c = loc.c
    if noise and rng is not None:
        c = c + noise * rng.random(c.shape)
    seeds = [int(j) for j in np.argsort(c[0, 1:], kind="stable")[:m] + 1]
    tours = [[s] for s in seeds]
    loads = np.array([loc.q[s] for s in seeds])
    unvisited = np.ones(n + 1, dtype=bool)
    unvisited[0] = False
    unvisited[seeds] = False
    while unvisited.any():
        cand = np.flatnonzero(unvisited)
        ends = np.array([t[-1] for t in tours])
        sub = c[np.ix_(ends, cand)].copy()
        sub[loads[:, None] + loc.q[cand][None, :] > Q] = np.inf
        ti, ci = np.unravel_index(np.argmin(sub), sub.shape)
        if not np.isfinite(sub[ti, ci]):
            return None
        j = int(cand[ci])
        tours[ti].append(j)
        loads[ti] += loc.q[j]
        unvisited[j] = False
    return tours


def _pack(loc: _Local, rng: np.random.Generator):
    """Randomized first-fit packing, used when greedy construction fails."""
    n, m, Q = loc.n, loc.m, loc.Q
    stops = list(range(1, n + 1))
    for attempt in range(200):
        keys = loc.q[1:] + (rng.random(n) if attempt else 0.0)
        order = [stops[i] for i in np.argsort(-keys, kind="stable")]
        bins: list[list[int]] = [[] for _ in range(m)]
        loads = [0] * m
        ok = True
        for s in order:
            # nonempty tours first, then first fit
            empties = [b for b in range(m) if not bins[b]]
            remaining = n - sum(len(b) for b in bins)
            choices = empties if len(empties) >= remaining else range(m)
            fit = [b for b in choices if loads[b] + loc.q[s] <= Q]
            if not fit:
                ok = False
                break
            b = fit[0] if attempt == 0 else fit[int(rng.integers(len(fit)))]
            bins[b].append(s)
            loads[b] += loc.q[s]
        if ok and all(bins):
            return bins
    return None


def _insert_positions(loc: _Local, tours, loads, r):
    """Cheapest feasible insertion of stop ``r``: (delta, tour, position)."""
    best = (math.inf, -1, -1)
    c = loc.c
    for ti, t in enumerate(tours):
        if loads[ti] + loc.q[r] > loc.Q:
            continue
        path = np.array([0, *t, 0])
        a, b = path[:-1], path[1:]
        if len(t) == 0:
            delta = np.array([c[0, r] + c[r, 0]])
        else:
            delta = c[a, r] + c[r, b] - c[a, b]
        pos = int(np.argmin(delta))
        if delta[pos] < best[0] - 1e-12:
            best = (float(delta[pos]), ti, pos)
    return best


def _relocate(loc: _Local, tours):
    """Move single stops to their cheapest position until no move improves."""
    tours = [list(t) for t in tours]
    c = loc.c
    improved = True
    while improved:
        improved = False
        for ti in range(len(tours)):
            for s in list(tours[ti]):
                t = tours[ti]
                if len(t) == 1 or s not in t:
                    continue
                i = t.index(s)
                a = t[i - 1] if i > 0 else 0
                b = t[i + 1] if i + 1 < len(t) else 0
                gain = c[a, s] + c[s, b] - c[a, b]
                t.pop(i)
                loads = [int(loc.q[u].sum()) for u in tours]
                delta, tj, pos = _insert_positions(loc, tours, loads, s)
                if delta < gain - 1e-12:
                    tours[tj].insert(pos, s)
                    improved = True
                else:
                    t.insert(i, s)
    return tours


def _lns(loc: _Local, tours, rng: np.random.Generator, max_iter: int, deadline: float):
    """Destroy-and-repair improvement with a cooling acceptance threshold."""
    tours = _relocate(loc, tours)
    cost = loc.cost(tours)
    best, best_cost = tours, cost
    n, m = loc.n, loc.m
    if n - m < 1:
        return tours, cost, 0
    finite = loc.c[np.isfinite(loc.c)]
    temp0 = 0.05 * float(np.mean(finite)) if finite.size else 0.0
    it = 0
    for it in range(1, max_iter + 1):
        if time.perf_counter() > deadline:
            break
        cand = [list(t) for t in tours]
        k = int(rng.integers(2, 5))
        removed = []
        move = rng.random()
        if move < 0.35:
            pool = [s for t in cand for s in t]
            rng.shuffle(pool)
        elif move < 0.65:
            # a consecutive segment of one tour
            t = cand[int(rng.integers(len(cand)))]
            i = int(rng.integers(len(t)))
            pool = t[i:i + k] + [s for u in cand for s in u if s not in t[i:i + k]]
        else:
            # drop the stops sitting on the most expensive arcs
            scores = {}
            for t in cand:
                path = [0, *t, 0]
                for i, s in enumerate(t, start=1):
                    scores[s] = loc.c[path[i - 1], s] + loc.c[s, path[i + 1]] + rng.random()
            pool = sorted(scores, key=scores.get, reverse=True)
        for s in pool:
            if len(removed) == k:
                break
            t = next(t for t in cand if s in t)
            if len(t) > 1:
                t.remove(s)
                removed.append(s)
        loads = [int(loc.q[t].sum()) if t else 0 for t in cand]
        ok = True
        greedy_repair = rng.random() < 0.5
        if not greedy_repair:
            rng.shuffle(removed)
        while removed:
            if greedy_repair:
                options = [(_insert_positions(loc, cand, loads, r), r) for r in removed]
                (delta, ti, pos), r = min(options, key=lambda o: o[0][0])
            else:
                r = removed[0]
                delta, ti, pos = _insert_positions(loc, cand, loads, r)
            if ti < 0:
                ok = False
                break
            cand[ti].insert(pos, r)
            loads[ti] += loc.q[r]
            removed.remove(r)
        if not ok:
            continue
        new_cost = loc.cost(cand)
        temp = temp0 * (1.0 - it / max_iter)
        if new_cost < cost - 1e-12 or (temp > 0 and rng.random() < math.exp((cost - new_cost) / temp)):
            tours, cost = cand, new_cost
            if cost < best_cost - 1e-12:
                best = _relocate(loc, tours)
                best_cost = loc.cost(best)
    return best, best_cost, it


def _heuristic(loc: _Local, seed: int = 0, max_iter: int = 2000, time_limit: float = 2.0):
    rng = np.random.default_rng(seed)
    deadline = time.perf_counter() + time_limit
    start = _greedy(loc)
    tries = 0
    while start is None and tries < 20:
        tries += 1
        start = _greedy(loc, rng, noise=float(tries))
    if start is None:
        start = _pack(loc, rng)
    if start is None:
        return None, math.inf, 0
    return _lns(loc, start, rng, max_iter, deadline)


# --------------------------------------------------------------------- drivers


def solve_costs(
    c: np.ndarray,
    inst: RoutingInstance,
    backend: Backend = "auto",
    seed: int = 0,
    max_iter: int = 2000,
    time_limit: float = 2.0,
) -> SolveReport:
    """Minimize the summed arc cost over feasible routings of ``inst``.

    ``c`` is a local cost matrix over ``inst.nodes`` (see :func:`cost_matrix`).
    """
    t0 = time.perf_counter()
    loc = _Local(c, inst)
    loc.check_feasible()
    if backend == "auto":
        backend = "exact" if loc.n <= EXACT_MAX_STOPS else "heuristic"
    if backend == "heuristic":
        tours, cost, iters = _heuristic(loc, seed, max_iter, time_limit)
        if tours is None:
            raise InfeasibleError("heuristic found no feasible routing")
        optimal, nodes = False, iters
    elif backend == "exact":
        start, _, _ = _heuristic(loc, seed, max_iter=min(max_iter, WARM_START_ITERS), time_limit=time_limit)
        tours, cost, nodes, complete = _branch_and_bound(loc, incumbent=start)
        if tours is None:
            raise InfeasibleError("no routing satisfies the fleet and capacity constraints")
        optimal = complete
    else:
        raise ValueError(f"unknown backend {backend!r}")
    routing = loc.routing(tours)
    return SolveReport(
        routing=routing,
        objective=loc.cost(tours),
        optimal=optimal,
        nodes_explored=nodes,
        wall_time=time.perf_counter() - t0,
        backend=backend,
    )


def mle_routing(
    p: np.ndarray,
    inst: RoutingInstance,
    backend: Backend = "auto",
    eps: float = EPS,
    **kwargs,
) -> SolveReport:
    """The feasible routing maximizing the product of ``p[s, r]`` over its arcs."""
    check_stochastic(p, inst)
    return solve_costs(cost_matrix(p, inst, eps), inst, backend, **kwargs)


def distance_costs(d: np.ndarray, inst: RoutingInstance) -> np.ndarray:
    """Exact ``-log Pr_dist`` costs, computed in log space."""
    nodes = np.asarray(inst.nodes)
    c = -distance_log_probabilities(d)[np.ix_(nodes, nodes)]
    np.fill_diagonal(c, np.inf)
    return c


def conventional_vrp(d: np.ndarray, inst: RoutingInstance, backend: Backend = "auto", **kwargs):
    """MLE routing under distance-softmax probabilities, i.e. the distance-minimal CVRP."""
    rep = solve_costs(distance_costs(d, inst), inst, backend, **kwargs)
    rep.distance_km = routing_distance(d, rep.routing)
    return rep


# ------------------------------------------------------------ brute-force oracle


def _set_partitions(items: Sequence[int], k: int):
    """All partitions of ``items`` into exactly ``k`` nonempty unordered blocks."""
    if k == 0:
        if not items:
            yield []
        return
    if len(items) < k:
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest, k - 1):
        yield [[first]] + part
    for part in _set_partitions(rest, k):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def enumerate_routings(loc_or_inst, c: np.ndarray | None = None):
    """Yield ``(cost, tours)`` for every feasible routing; tours use local indices."""
    loc = loc_or_inst if isinstance(loc_or_inst, _Local) else _Local(c, loc_or_inst)
    for part in _set_partitions(list(range(1, loc.n + 1)), loc.m):
        if any(loc.q[b].sum() > loc.Q for b in part):
            continue
        per_block = []
        for b in part:
            per_block.append([(loc.cost([p]), p) for p in itertools.permutations(sorted(b))])
        for combo in itertools.product(*per_block):
            yield sum(cc for cc, _ in combo), [p for _, p in combo]


def _block_costs(loc: _Local, block: tuple[int, ...], cache: dict):
    if block not in cache:
        perms = np.array(list(itertools.permutations(block)), dtype=int)
        c = loc.c
        cost = c[0, perms[:, 0]] + c[perms[:, -1], 0]
        if perms.shape[1] > 1:
            cost = cost + c[perms[:, :-1], perms[:, 1:]].sum(axis=1)
        cache[block] = (perms, cost)
    return cache[block]


def brute_force_costs(c: np.ndarray, inst: RoutingInstance, tol: float = 1e-9):
    """Exhaustive optimum over all feasible routings.

    Returns ``(best_cost, best_tours, argmin)`` where ``argmin`` is the set of
    every optimal routing (as frozensets of global arcs) within ``tol``.
    """
    loc = _Local(c, inst)
    if loc.n > BRUTE_FORCE_MAX_STOPS:
        raise ValueError(f"{loc.n} stops is too many for enumeration (max {BRUTE_FORCE_MAX_STOPS})")
    loc.check_feasible()
    cache: dict = {}
    scored = []
    for part in _set_partitions(list(range(1, loc.n + 1)), loc.m):
        blocks = [tuple(sorted(b)) for b in part]
        if any(loc.q[list(b)].sum() > loc.Q for b in blocks):
            continue
        total = 0.0
        for b in blocks:
            _, cost = _block_costs(loc, b, cache)
            total += float(cost.min())
        scored.append((total, blocks))
    if not scored:
        raise InfeasibleError("no routing satisfies the fleet and capacity constraints")
    best = min(s for s, _ in scored)
    argmin: set[frozenset] = set()
    best_tours = None
    for total, blocks in scored:
        if total > best + tol:
            continue
        options = []
        for b in blocks:
            perms, cost = _block_costs(loc, b, cache)
            options.append([tuple(int(v) for v in perms[i])
                            for i in np.flatnonzero(cost <= cost.min() + tol)])
        for combo in itertools.product(*options):
            argmin.add(loc.routing(combo).arcs)
            canon = _canonical(combo)
            if best_tours is None or canon < best_tours:
                best_tours = canon
    return best, [list(t) for t in best_tours], argmin


def brute_force_routing(p: np.ndarray, inst: RoutingInstance, eps: float = EPS) -> SolveReport:
    t0 = time.perf_counter()
    c = cost_matrix(p, inst, eps)
    best, tours, _ = brute_force_costs(c, inst)
    loc = _Local(c, inst)
    return SolveReport(
        routing=loc.routing(tours),
        objective=loc.cost(tours),
        optimal=True,
        nodes_explored=0,
        wall_time=time.perf_counter() - t0,
        backend="brute_force",
    )


def check_report(rep: SolveReport, inst: RoutingInstance, c: np.ndarray) -> list[str]:
    """Consistency checks on a solve report: feasibility and objective re-sum."""
    out = validate_routing(inst, rep.routing)
    if abs(routing_cost(c, inst, rep.routing) - rep.objective) > 1e-9:
        out.append("objective does not equal the re-summed arc costs")
    return out


SolverFn = Callable[[np.ndarray, RoutingInstance], SolveReport]
