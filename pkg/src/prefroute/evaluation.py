"""Solution-similarity metrics and rolling-window evaluation.

Arc difference (AD) counts arcs of the realized routing that the predicted
routing does not use. Route difference (RD) pairs realized and predicted
routes greedily by smallest stop-set difference and counts the stops a
realized route would have to give up to match its partner.

Example
-------
>>> from prefroute.core import Routing
>>> actual = Routing.from_tours([[1, 2], [3]])
>>> pred = Routing.from_tours([[2, 1], [3]])
>>> arc_difference(actual, pred)
(3, 60.0)
>>> route_difference(Routing.from_tours([[1, 2], [3]]), Routing.from_tours([[1], [2, 3]]))
(1, 33.333333333333336)
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from .core import DEPOT, HistoryDataset, Routing, RoutingInstance, Weekday
from .dfl import DflConfig, dfl_train
from .markov import (
    UNIFORM,
    WeekdayMarkovCache,
    WeightingScheme,
    distance_probabilities,
    markov_probabilities,
    transition_counts,
)
from .neural import ArcModelParams, TrainConfig, predict_matrix, train_models
from .solver import EPS, conventional_vrp, mle_routing, routing_distance

log = logging.getLogger(__name__)

Estimator = Literal["markov_allday", "markov_weekday", "neural", "dfl", "conventional"]
ESTIMATORS: tuple[str, ...] = ("markov_allday", "markov_weekday", "neural", "dfl", "conventional")
METRICS = ("AD_abs", "AD_pct", "RD_abs", "RD_pct", "CE", "distance_km")


# ------------------------------------------------------------------ metrics


def _same_instance(x_actual: Routing, x_pred: Routing) -> None:
    if x_actual.stops != x_pred.stops:
        raise ValueError("routings cover different stops")


def arc_difference(x_actual: Routing, x_pred: Routing) -> tuple[int, float]:
    """Arcs of ``x_actual`` absent from ``x_pred``, as a count and a percentage."""
    _same_instance(x_actual, x_pred)
    missing = len(x_actual.arcs - x_pred.arcs)
    return missing, 100.0 * missing / max(len(x_actual.arcs), 1)


def route_difference(x_actual: Routing, x_pred: Routing) -> tuple[int, float]:
    """Stops on a different route after greedy route matching.

    Route pairs are matched without replacement in order of increasing
    symmetric difference of their stop sets; ties go to the smallest
    (actual index, predicted index) pair, routes being indexed in order of
    their sorted stop lists. Each matched pair contributes the
    actual route's stops missing from its partner; unmatched actual routes
    contribute all their stops.
    """
    _same_instance(x_actual, x_pred)
    # Index routes by their sorted stop lists so ties never depend on visit order.
    actual = sorted((set(t) for t in x_actual.tours), key=sorted)
    pred = sorted((set(t) for t in x_pred.tours), key=sorted)
    pairs = sorted(
        (len(a ^ p), i, j) for i, a in enumerate(actual) for j, p in enumerate(pred)
    )
    used_a, used_p = set(), set()
    total = 0
    for _, i, j in pairs:
        if i in used_a or j in used_p:
            continue
        used_a.add(i)
        used_p.add(j)
        total += len(actual[i] - pred[j])
    total += sum(len(actual[i]) for i in range(len(actual)) if i not in used_a)
    n_stops = len(x_actual.stops - {DEPOT})
    return total, 100.0 * total / max(n_stops, 1)


def cross_entropy(p: np.ndarray, inst: RoutingInstance, x_actual: Routing, eps: float = EPS) -> float:
    """Mean over the active stops of ``-log(p[s, successor] + eps)``."""
    succ = x_actual.successors
    vals = [-math.log(p[s, succ[s][0]] + eps) for s in inst.active_stops]
    return float(np.mean(vals)) if vals else 0.0


# ------------------------------------------------------------------- report


@dataclass
class EvalRow:
    timestamp: int
    weekday: str
    AD_abs: int
    AD_pct: float
    RD_abs: int
    RD_pct: float
    CE: float
    distance_km: float


def _means(rows: list[EvalRow]) -> dict:
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in METRICS} | {"n": len(rows)}


@dataclass
class EvalReport:
    estimator: str
    per_instance: list[EvalRow]
    predictions: dict = field(default_factory=dict, repr=False)  # timestamp -> Routing
    matrices: dict = field(default_factory=dict, repr=False)  # timestamp -> TransitionMatrix
    wall_time: float = 0.0

    @property
    def overall(self) -> dict:
        return _means(self.per_instance)

    @property
    def per_weekday(self) -> dict[str, dict]:
        out = {}
        for wd in Weekday:
            rows = [r for r in self.per_instance if r.weekday == wd.name]
            if rows:
                out[wd.name] = _means(rows)
        return out

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "per_instance": [asdict(r) for r in self.per_instance],
            "aggregates": {"overall": self.overall, "per_weekday": self.per_weekday},
            "wall_time": self.wall_time,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["timestamp", "weekday", *METRICS])
        for r in self.per_instance:
            w.writerow([r.timestamp, r.weekday, *(getattr(r, k) for k in METRICS)])
        return buf.getvalue()

    def save(self, path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())


# --------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalConfig:
    test_per_weekday: int = 7
    train_share: float = 0.75
    weighting: WeightingScheme = UNIFORM
    train: TrainConfig = TrainConfig()
    dfl: DflConfig = DflConfig()
    backend: str = "auto"
    eps: float = EPS
    seed: int = 0
    max_iter: int = 2000
    time_limit: float = math.inf

    def __post_init__(self):
        if self.test_per_weekday < 1:
            raise ValueError("test_per_weekday must be at least 1")
        if not 0.0 < self.train_share < 1.0:
            raise ValueError("train_share must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["dfl"] = self.dfl.to_dict()
        return d


def split_indices(history: HistoryDataset, k: int = 7, train_share: float = 0.75) -> list[int]:
    """Record indices of the test window: the last few records of every weekday.

    Each weekday contributes ``min(k, count - ceil(train_share * count))``
    of its most recent records, so roughly ``train_share`` of every weekday
    stays in training.
    """
    by_day: dict[int, list[int]] = {}
    for i, (inst, _) in enumerate(history.records):
        by_day.setdefault(int(inst.weekday), []).append(i)
    out = []
    for idx in by_day.values():
        k_wd = min(k, len(idx) - math.ceil(train_share * len(idx)))
        if k_wd > 0:
            out.extend(idx[-k_wd:])
    out.sort()
    if not out:
        raise ValueError("history too short for a test window")
    if out[0] == 0:
        raise ValueError("history too short: no training day precedes the test window")
    return out


class _Predictor:
    """Transition matrices for test days, using only strictly earlier records."""

    def __init__(self, history: HistoryDataset, estimator: str, cfg: EvalConfig, first_test: int,
                 models: Mapping[int, ArcModelParams] | None = None):
        self.history = history
        self.estimator = estimator
        self.cfg = cfg
        self.models = models
        if estimator in ("markov_allday", "markov_weekday") and cfg.weighting.kind == "uniform":
            self.cache = WeekdayMarkovCache(history, filtered=estimator == "markov_weekday")
        elif estimator in ("neural", "dfl"):
            self.cache = WeekdayMarkovCache(history, filtered=True)
        else:
            self.cache = None
        if estimator in ("neural", "dfl") and models is None:
            train = history.subset(range(first_test))
            markov = WeekdayMarkovCache(train, filtered=True)
            t0 = time.perf_counter()
            if estimator == "neural":
                self.models = train_models(train, cfg.train, markov=markov)
            else:
                self.models = dfl_train(train, cfg.dfl, cfg.train, markov=markov)
            log.info("%s: trained %d models in %.1fs", estimator, len(self.models),
                     time.perf_counter() - t0)

    def matrix(self, inst: RoutingInstance) -> np.ndarray:
        est = self.estimator
        if est == "conventional":
            return distance_probabilities(self.history.distance_matrix)
        if est in ("neural", "dfl"):
            return predict_matrix(self.models, self.history, inst, self.cfg.train, self.cache)
        if self.cache is not None:
            return self.cache.matrix(inst.timestamp, inst.weekday)
        day_filter = "allday" if est == "markov_allday" else inst.weekday
        f = transition_counts(self.history, day_filter, self.cfg.weighting, upto=inst.timestamp)
        return markov_probabilities(f)


def rolling_evaluation(
    history: HistoryDataset,
    estimator: Estimator,
    cfg: EvalConfig = EvalConfig(),
    models: Mapping[int, ArcModelParams] | None = None,
) -> EvalReport:
    """Chronological train/test evaluation of one estimator.

    Learned models (``neural``, ``dfl``) are trained once on the records
    before the first test day unless ``models`` is given. Every test day is
    then predicted from data strictly before it, solved, and compared with
    the realized routing.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    t0 = time.perf_counter()
    tests = split_indices(history, cfg.test_per_weekday, cfg.train_share)
    pred = _Predictor(history, estimator, cfg, tests[0], models)
    d = history.distance_matrix
    rows, routings, mats = [], {}, {}
    for i in tests:
        inst, x_actual = history.records[i]
        p = pred.matrix(inst)
        kw = dict(seed=cfg.seed, max_iter=cfg.max_iter, time_limit=cfg.time_limit)
        if estimator == "conventional":
            rep = conventional_vrp(d, inst, cfg.backend, **kw)
        else:
            rep = mle_routing(p, inst, cfg.backend, cfg.eps, **kw)
        x = rep.routing
        ad, ad_pct = arc_difference(x_actual, x)
        rd, rd_pct = route_difference(x_actual, x)
        rows.append(EvalRow(
            timestamp=inst.timestamp,
            weekday=inst.weekday.name,
            AD_abs=ad, AD_pct=ad_pct, RD_abs=rd, RD_pct=rd_pct,
            CE=cross_entropy(p, inst, x_actual, cfg.eps),
            distance_km=routing_distance(d, x),
        ))
        routings[inst.timestamp] = x
        mats[inst.timestamp] = p
    return EvalReport(estimator, rows, routings, mats, time.perf_counter() - t0)


__all__ = [
    "ESTIMATORS", "EvalConfig", "EvalReport", "EvalRow", "arc_difference",
    "cross_entropy", "rolling_evaluation", "route_difference", "split_indices",
]
