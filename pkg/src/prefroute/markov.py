"""Markov-counting and distance-based transition probabilities.

All matrices are dense ``(N, N)`` arrays over the full stop universe, with
``p[s, r] = Pr(r | s)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .core import HistoryDataset, Weekday


@dataclass(frozen=True)
class WeightingScheme:
    """Per-record weights for transition counting.

    ``exponential`` gives the k-th most recent qualifying record the weight
    ``2 ** (-k / half_life)``.
    """

    kind: Literal["uniform", "exponential"] = "uniform"
    half_life: float = 8.0

    def __post_init__(self):
        if self.kind not in ("uniform", "exponential"):
            raise ValueError(f"unknown weighting scheme {self.kind!r}")
        if not self.half_life > 0:
            raise ValueError("half_life must be positive")

    def weights(self, n: int) -> np.ndarray:
        """Weights for ``n`` qualifying records in chronological order."""
        if self.kind == "uniform":
            return np.ones(n)
        k = np.arange(n - 1, -1, -1, dtype=float)
        return 2.0 ** (-k / self.half_life)


UNIFORM = WeightingScheme("uniform")


def _qualifies(weekday: Weekday, day_filter) -> bool:
    if day_filter is None or day_filter == "allday":
        return True
    return weekday == Weekday.parse(day_filter)


def transition_counts(
    history: HistoryDataset,
    day_filter: "str | int | Weekday | None" = "allday",
    scheme: WeightingScheme = UNIFORM,
    upto: int | None = None,
) -> np.ndarray:
    """Weighted arc frequencies over records with timestamp ``< upto``.

    ``day_filter`` is ``"allday"`` (or None) or a weekday; only records on
    that weekday are counted. With no qualifying record the result is the
    zero matrix.
    """
    n = history.universe_size
    chosen = [
        x for inst, x in history.records
        if (upto is None or inst.timestamp < upto) and _qualifies(inst.weekday, day_filter)
    ]
    f = np.zeros((n, n))
    for w, x in zip(scheme.weights(len(chosen)), chosen):
        arcs = np.array(sorted(x.arcs), dtype=int).reshape(-1, 2)
        f[arcs[:, 0], arcs[:, 1]] += w
    return f


def uniform_rows(n: int) -> np.ndarray:
    """Uniform distribution over the non-self stops, for every source."""
    p = np.full((n, n), 1.0 / (n - 1)) if n > 1 else np.zeros((n, n))
    np.fill_diagonal(p, 0.0)
    return p


def markov_probabilities(f: np.ndarray) -> np.ndarray:
    """Row-normalize a count matrix.

    Self-transitions are dropped. Rows with no mass fall back to the uniform
    distribution over every other stop (depot included).
    """
    f = np.array(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("counts must be nonnegative")
    np.fill_diagonal(f, 0.0)
    total = f.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    p = np.divide(f, total, out=np.zeros_like(f), where=total > 0)
    p[empty] = uniform_rows(f.shape[0])[empty]
    return p


def distance_probabilities(d: np.ndarray) -> np.ndarray:
    """Row-wise softmax of negated distances over the non-self stops."""
    return np.exp(distance_log_probabilities(d))


def distance_log_probabilities(d: np.ndarray) -> np.ndarray:
    """``log Pr_dist(r | s)``; the diagonal is ``-inf``."""
    logits = -np.asarray(d, dtype=float).copy()
    np.fill_diagonal(logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    z = logits - top
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def mix(p_markov: np.ndarray, p_dist: np.ndarray, omega: float) -> np.ndarray:
    """Convex combination ``omega * p_markov + (1 - omega) * p_dist``."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    if p_markov.shape != p_dist.shape:
        raise ValueError("matrices differ in shape")
    return omega * p_markov + (1.0 - omega) * p_dist


def is_row_stochastic(p: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(np.all(p >= -tol) and np.allclose(p.sum(axis=1), 1.0, atol=tol))


class WeekdayMarkovCache:
    """Per-day weekday-filtered uniform Markov matrices, built incrementally.

    ``matrix(t, weekday)`` equals
    ``markov_probabilities(transition_counts(history, weekday, UNIFORM, upto=t))``
    for any ``t``, without re-scanning the history each time.
    """

    def __init__(self, history: HistoryDataset, filtered: bool = True):
        self.history = history
        self.filtered = filtered
        self._stamps: dict[int, list[int]] = {}
        self._cum: dict[int, list[np.ndarray]] = {}
        n = history.universe_size
        for inst, x in history.records:
            key = int(inst.weekday) if filtered else -1
            cum = self._cum.setdefault(key, [np.zeros((n, n))])
            f = cum[-1].copy()
            for s, r in x.arcs:
                f[s, r] += 1.0
            cum.append(f)
            self._stamps.setdefault(key, []).append(inst.timestamp)
        self._memo: dict[tuple[int, int], np.ndarray] = {}

    def counts(self, t: int, weekday) -> np.ndarray:
        key = int(Weekday.parse(weekday)) if self.filtered else -1
        stamps = self._stamps.get(key, [])
        k = int(np.searchsorted(stamps, t, side="left"))
        if key not in self._cum:
            n = self.history.universe_size
            return np.zeros((n, n))
        return self._cum[key][k]

    def matrix(self, t: int, weekday) -> np.ndarray:
        key = (t, int(Weekday.parse(weekday)) if self.filtered else -1)
        if key not in self._memo:
            self._memo[key] = markov_probabilities(self.counts(t, weekday))
        return self._memo[key]


def save_matrix(p: np.ndarray, path: str | Path, labels=None) -> None:
    labels = list(range(p.shape[0])) if labels is None else list(labels)
    doc = {"labels": labels, "matrix": np.asarray(p).tolist()}
    Path(path).write_text(json.dumps(doc))


def load_matrix(path: str | Path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    p = np.asarray(doc["matrix"], dtype=float)
    labels = doc.get("labels", list(range(p.shape[0])))
    if list(labels) != list(range(p.shape[0])):
        # Reindex onto 0..max(label); unlisted stops get empty rows.
        n = max(labels) + 1
        full = np.zeros((n, n))
        idx = np.asarray(labels)
        full[np.ix_(idx, idx)] = p
        p = full
    return p
