"""Synthetic routing histories with known planner preferences.

Planner preferences are modelled as an ordering of the customers: a planner
likes to go from a customer to the next ones in that ordering, with a bias
toward short arcs. There is one ordering shared by every day and one per
weekday; ``weekday_pattern_strength`` interpolates between them. Each day's
realized routing is the maximum-likelihood routing under the weekday's
ground-truth matrix with multiplicative noise on the arc costs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import HistoryDataset, Routing, RoutingInstance, Weekday
from .solver import EPS, InfeasibleError, solve_costs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    universe_size: int = 73  # customers, depot excluded
    mean_active: int = 31
    vehicles_mean: int = 8
    weeks: int = 39
    weekday_pattern_strength: float = 0.8
    noise: float = 0.2
    seed: int = 0
    day_rate: float = 0.74  # share of calendar days with tours
    fixed_active: bool = False  # same stops and demands on every same-weekday day
    area_km: float = 30.0
    preference_bonus: float = 4.0
    preference_decay: float = 1.5
    distance_scale_km: float = 6.0
    capacity: int | None = None
    heuristic_iters: int = 300
    regularity: float = 1.0  # 1 = each weekday has fixed regulars; 0 = independent request rates

    def __post_init__(self):
        if not 0 < self.mean_active < self.universe_size:
            raise ValueError("mean_active must lie strictly between 0 and universe_size")
        if self.weeks < 1:
            raise ValueError("weeks must be at least 1")
        if self.vehicles_mean < 1:
            raise ValueError("vehicles_mean must be at least 1")
        for name in ("weekday_pattern_strength", "noise", "day_rate", "regularity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    coords: np.ndarray
    base_order: np.ndarray
    weekday_orders: list[np.ndarray]
    matrices: list[np.ndarray] = field(default_factory=list)  # one per weekday


def _order_bonus(order: np.ndarray, n: int, bonus: float, decay: float) -> np.ndarray:
    """Bonus for following the cyclic customer ``order`` (depot row/column untouched)."""
    pos = np.empty(n + 1, dtype=int)
    pos[order] = np.arange(len(order))
    k = len(order)
    b = np.zeros((n + 1, n + 1))
    cust = np.arange(1, n + 1)
    gap = (pos[cust][None, :] - pos[cust][:, None]) % k
    b[1:, 1:] = np.where(gap > 0, bonus * np.exp(-(gap - 1) / decay), 0.0)
    return b


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.copy()
    np.fill_diagonal(z, -np.inf)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ground_truth(cfg: SynthConfig, rng: np.random.Generator) -> GroundTruth:
    n = cfg.universe_size
    coords = rng.uniform(0.0, cfg.area_km, size=(n + 1, 2))
    coords[0] = cfg.area_km / 2
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    base = rng.permutation(np.arange(1, n + 1))
    weekly = [rng.permutation(np.arange(1, n + 1)) for _ in range(7)]
    a = cfg.weekday_pattern_strength
    b_base = _order_bonus(base, n, cfg.preference_bonus, cfg.preference_decay)
    mats = []
    for w in range(7):
        b_w = _order_bonus(weekly[w], n, cfg.preference_bonus, cfg.preference_decay)
        logits = -d / cfg.distance_scale_km + (1 - a) * b_base + a * b_w
        mats.append(_row_softmax(logits))
    return GroundTruth(coords, base, weekly, mats)


def _distance_matrix(coords: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    return np.round(d, 3)


def synth_generate(cfg: SynthConfig) -> HistoryDataset:
    return generate(cfg)[0]


def generate(cfg: SynthConfig) -> tuple[HistoryDataset, GroundTruth]:
    """Deterministic (under ``cfg.seed``) synthetic history and its ground truth."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.universe_size
    truth = ground_truth(cfg, rng)
    d = _distance_matrix(truth.coords)

    # Customer request rates: some daily, some occasional, with weekday variation.
    base_rate = rng.beta(0.9, 0.9, n) + 0.05
    base_rate *= cfg.mean_active / base_rate.sum()
    weekday_factor = np.exp(0.6 * rng.normal(size=(7, n)))
    rates = np.clip(base_rate[None, :] * weekday_factor, 0.0, 1.0)
    rates *= cfg.mean_active / rates.sum(axis=1, keepdims=True)
    rates = np.clip(rates, 0.0, 1.0)
    if cfg.regularity > 0:
        # Regulars: each weekday's most likely customers, requesting almost always.
        regular = np.zeros((7, n))
        top = np.argsort(-rates, axis=1)[:, : cfg.mean_active]
        np.put_along_axis(regular, top, 0.95, axis=1)
        regular[regular == 0] = 0.05 * cfg.mean_active / n
        rates = (1 - cfg.regularity) * rates + cfg.regularity * regular
    base_demand = rng.integers(1, 11, n)

    mean_q = float(base_demand.mean())
    capacity = cfg.capacity
    if capacity is None:
        capacity = math.ceil(1.25 * cfg.mean_active * mean_q / cfg.vehicles_mean)
    peak = int(math.ceil(base_demand.max() * 1.3))
    if peak > capacity:
        log.warning("capacity %d cannot hold a %d demand; scaling up", capacity, peak)
        capacity = peak

    def draw_day(w: int):
        active = np.flatnonzero(rng.random(n) < rates[w]) + 1
        if active.size == 0:
            active = np.array([int(rng.integers(1, n + 1))])
        demands = {int(s): int(max(1, round(base_demand[s - 1] * rng.uniform(0.7, 1.3))))
                   for s in active}
        return active, demands

    fixed = {w: draw_day(w) for w in range(7)} if cfg.fixed_active else {}

    records = []
    for t in range(cfg.weeks * 7):
        if cfg.day_rate < 1.0 and rng.random() >= cfg.day_rate:
            continue
        w = t % 7
        active, demands = fixed[w] if cfg.fixed_active else draw_day(w)
        load = sum(demands.values())
        m = int(np.clip(math.ceil(load / (0.8 * capacity)), 1, len(active)))
        noise = np.exp(cfg.noise * rng.normal(size=(len(active) + 1,) * 2))
        while True:
            inst = RoutingInstance(t, Weekday(w), tuple(int(s) for s in active), demands, m, capacity)
            nodes = np.asarray(inst.nodes)
            c = -np.log(truth.matrices[w][np.ix_(nodes, nodes)] + EPS) * noise
            np.fill_diagonal(c, np.inf)
            try:
                rep = solve_costs(c, inst, "auto", seed=cfg.seed,
                                  max_iter=cfg.heuristic_iters, time_limit=math.inf)
                break
            except InfeasibleError:
                if m >= len(active):
                    raise
                log.warning("day %d infeasible with %d vehicles; adding one", t, m)
                m += 1
        records.append((inst, rep.routing))

    history = HistoryDataset(
        records=tuple(records),
        distance_matrix=d,
        capacity=capacity,
        stop_names={i: ("depot" if i == 0 else f"customer {i}") for i in range(n + 1)},
    )
    return history.validate(), truth


def routing_from_truth(truth: GroundTruth, inst: RoutingInstance) -> Routing:
    """Noise-free realized routing for ``inst`` under the ground truth."""
    nodes = np.asarray(inst.nodes)
    c = -np.log(truth.matrices[int(inst.weekday)][np.ix_(nodes, nodes)] + EPS)
    np.fill_diagonal(c, np.inf)
    return solve_costs(c, inst, "auto", time_limit=math.inf).routing
