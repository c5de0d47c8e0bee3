import numpy as np
import pytest

from prefroute.core import HistoryDataset, Routing, RoutingInstance, Weekday


def make_history(days, n_customers, capacity=10, d=None, weekdays=None):
    """History from a list of tour lists; every stop has demand 1."""
    records = []
    for t, tours in enumerate(days):
        stops = sorted(s for tour in tours for s in tour)
        wd = Weekday(t % 7) if weekdays is None else Weekday(weekdays[t])
        inst = RoutingInstance(t, wd, tuple(stops), {s: 1 for s in stops}, len(tours), capacity)
        records.append((inst, Routing.from_tours(tours)))
    n = n_customers + 1
    if d is None:
        coords = np.arange(n, dtype=float)
        d = np.abs(coords[:, None] - coords[None, :])
    return HistoryDataset(tuple(records), d, capacity, {i: str(i) for i in range(n)}).validate()


def random_instance(rng, n_min=3, n_max=8, m_max=3, universe=None):
    """Random instance with m <= n and total demand within m*Q (packing may still fail)."""
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        m = int(rng.integers(1, min(m_max, n) + 1))
        stops = tuple(range(1, n + 1)) if universe is None else tuple(
            sorted(rng.choice(np.arange(1, universe), n, replace=False).tolist()))
        demands = {s: int(rng.integers(1, 6)) for s in stops}
        q = max(demands.values())
        capacity = int(rng.integers(q, q + 2 * sum(demands.values()) // m + 2))
        inst = RoutingInstance(0, Weekday.Mon, stops, demands, m, capacity)
        if not inst.problems():
            return inst


def random_stochastic(rng, n, concentration=0.5):
    p = rng.dirichlet(np.full(n, concentration), size=n)
    np.fill_diagonal(p, 0.0)
    return p / p.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
