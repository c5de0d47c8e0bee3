import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefroute.core import Routing, RoutingInstance, validate_routing
from prefroute.markov import distance_probabilities
from prefroute.solver import (
    InfeasibleError,
    brute_force_costs,
    brute_force_routing,
    check_report,
    conventional_vrp,
    cost_matrix,
    enumerate_routings,
    mle_routing,
    routing_cost,
    solve_costs,
)

from conftest import random_instance, random_stochastic


def _inst(n, m, demands=None, Q=100):
    stops = tuple(range(1, n + 1))
    demands = demands or {s: 1 for s in stops}
    return RoutingInstance(0, "Mon", stops, demands, m, Q)


def test_single_stop_is_forced():
    rng = np.random.default_rng(0)
    p = random_stochastic(rng, 4)
    inst = RoutingInstance(0, "Mon", (2,), {2: 1}, 1, 5)
    for backend in ("exact", "heuristic"):
        assert mle_routing(p, inst, backend).routing == Routing.from_tours([[2]])


def test_engineered_chain_is_recovered():
    p = np.full((4, 4), 0.1 / 2)
    for s, r in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        p[s] = 0.05
        p[s, r] = 0.9
    np.fill_diagonal(p, 0.0)
    p /= p.sum(axis=1, keepdims=True)
    inst = _inst(3, 1)
    rep = mle_routing(p, inst, "exact")
    assert rep.routing == Routing.from_tours([[1, 2, 3]])
    assert rep.objective == pytest.approx(brute_force_routing(p, inst).objective, abs=1e-12)
    # all 6 orders, by hand
    c = cost_matrix(p, inst)
    costs = {perm: routing_cost(c, inst, Routing.from_tours([perm])) for perm in itertools.permutations([1, 2, 3])}
    assert min(costs, key=costs.get) == (1, 2, 3)


def test_two_by_two_split():
    rng = np.random.default_rng(1)
    inst = _inst(4, 2, {s: 2 for s in range(1, 5)}, Q=4)
    for _ in range(10):
        p = random_stochastic(rng, 5)
        rep = mle_routing(p, inst, "exact")
        assert sorted(len(t) for t in rep.routing.tours) == [2, 2]
        assert rep.objective == pytest.approx(brute_force_routing(p, inst).objective, abs=1e-9)


def test_forced_fleet_and_pigeonhole():
    p = random_stochastic(np.random.default_rng(2), 3)
    rep = brute_force_routing(p, _inst(2, 2))
    assert rep.routing == Routing.from_tours([[1], [2]])
    for solve in (brute_force_routing, lambda p, i: mle_routing(p, i, "exact"),
                  lambda p, i: mle_routing(p, i, "heuristic")):
        with pytest.raises(InfeasibleError):
            solve(p, RoutingInstance(0, "Mon", (1,), {1: 1}, 2, 5))


def test_capacity_infeasibility():
    p = random_stochastic(np.random.default_rng(3), 3)
    inst = RoutingInstance(0, "Mon", (1, 2), {1: 3, 2: 3}, 1, 5)
    with pytest.raises(InfeasibleError):
        mle_routing(p, inst, "exact")


def test_non_stochastic_matrix_rejected():
    with pytest.raises(ValueError, match="stochastic"):
        mle_routing(np.ones((3, 3)), _inst(2, 1))


def test_conventional_line():
    d = np.abs(np.subtract.outer(np.arange(3.0), np.arange(3.0)))
    rep = conventional_vrp(d, _inst(2, 1))
    assert rep.routing in (Routing.from_tours([[1, 2]]), Routing.from_tours([[2, 1]]))
    assert rep.distance_km == 4.0


def test_conventional_relabeling_symmetry():
    d = np.ones((5, 5)) - np.eye(5)
    objs = []
    for perm in itertools.permutations(range(1, 5)):
        idx = [0, *perm]
        rep = conventional_vrp(d[np.ix_(idx, idx)], _inst(4, 2))
        objs.append(rep.objective)
    assert np.ptp(objs) < 1e-12


def test_tie_break_is_lexicographic():
    # uniform probabilities: every single-vehicle order ties
    p = np.full((4, 4), 1 / 3)
    np.fill_diagonal(p, 0)
    assert mle_routing(p, _inst(3, 1), "exact").routing.tours == ((1, 2, 3),)
    assert brute_force_routing(p, _inst(3, 1)).routing.tours == ((1, 2, 3),)


def test_enumeration_counts():
    # 3 stops, 1 vehicle: 3! orders; 3 stops, 2 vehicles: 3 splits x 2 orders of the pair
    c = np.zeros((4, 4))
    np.fill_diagonal(c, np.inf)
    assert sum(1 for _ in enumerate_routings(_inst(3, 1), c)) == 6
    assert sum(1 for _ in enumerate_routings(_inst(3, 2), c)) == 6


def test_brute_force_argmin_contains_enumerated_optima(rng):
    for _ in range(20):
        inst = random_instance(rng, 3, 6)
        c = cost_matrix(random_stochastic(rng, inst.n_stops + 1), inst)
        best, _, argmin = brute_force_costs(c, inst)
        enum = [(cost, tours) for cost, tours in enumerate_routings(inst, c)]
        ref = min(cost for cost, _ in enum)
        assert best == pytest.approx(ref, abs=1e-9)
        expected = set()
        for cost, tours in enum:
            if cost <= ref + 1e-9:
                expected.add(Routing.from_tours([[inst.nodes[i] for i in t] for t in tours]).arcs)
        assert argmin == expected


def test_heuristic_feasible_and_not_better_than_exact(rng):
    for _ in range(40):
        inst = random_instance(rng, 3, 8)
        p = random_stochastic(rng, inst.n_stops + 1)
        ex = mle_routing(p, inst, "exact")
        he = mle_routing(p, inst, "heuristic", max_iter=200, time_limit=math.inf)
        c = cost_matrix(p, inst)
        assert check_report(he, inst, c) == [] and check_report(ex, inst, c) == []
        assert he.objective >= ex.objective - 1e-9
        assert ex.optimal and not he.optimal


def test_heuristic_on_larger_instance(rng):
    inst = random_instance(rng, 25, 30, m_max=5)
    p = random_stochastic(rng, inst.n_stops + 1)
    rep = mle_routing(p, inst, "auto", max_iter=300, time_limit=math.inf)
    assert rep.backend == "heuristic"
    assert validate_routing(inst, rep.routing) == []


def test_solver_is_deterministic(rng):
    inst = random_instance(rng, 8, 8)
    p = random_stochastic(rng, 9)
    a = mle_routing(p, inst, "heuristic", time_limit=math.inf)
    b = mle_routing(p, inst, "heuristic", time_limit=math.inf)
    assert a.routing == b.routing


def test_epsilon_monotone_smoothing(rng):
    checked = 0
    while checked < 10:
        inst = random_instance(rng, 3, 6)
        p = random_stochastic(rng, inst.n_stops + 1, 1.0)
        c = cost_matrix(p, inst, 1e-6)
        best, _, argmin = brute_force_costs(c, inst, tol=1e-3)
        if len(argmin) != 1:
            continue  # optimum not unique with margin
        a = mle_routing(p, inst, "exact", eps=1e-6).routing
        b = mle_routing(p, inst, "exact", eps=1e-9).routing
        assert a == b
        checked += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exact_matches_brute_force_property(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 2, 7)
    p = random_stochastic(rng, inst.n_stops + 1)
    try:
        bf = brute_force_routing(p, inst)
    except InfeasibleError:
        # aggregate capacity fits but the demands do not pack into m tours
        with pytest.raises(InfeasibleError):
            mle_routing(p, inst, "exact")
        return
    ex = mle_routing(p, inst, "exact")
    assert ex.objective == pytest.approx(bf.objective, abs=1e-9)
    assert validate_routing(inst, ex.routing) == []


def test_report_serializes():
    rep = conventional_vrp(np.ones((3, 3)) - np.eye(3), _inst(2, 1))
    doc = rep.to_dict()
    assert doc["routes"] and doc["distance_km"] == 3.0 and doc["optimal"] is True


def test_cost_matrix_shape_errors():
    with pytest.raises(ValueError):
        cost_matrix(np.eye(2), _inst(3, 1))
    with pytest.raises(ValueError):
        solve_costs(np.zeros((2, 2)), _inst(3, 1))
