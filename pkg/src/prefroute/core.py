"""Domain model for preference-learning CVRP histories.

Stops are integer ids in ``range(universe_size)``; id 0 is always the depot.
A :class:`Routing` is stored as its set of directed arcs, which makes it the
same object as the binary incidence matrix used by the learning code. Tours
are derived by walking from the depot.
"""
from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEPOT = 0

Arc = tuple[int, int]


class HistoryFormatError(ValueError):
    """Raised when a history or instance file cannot be parsed."""


class ValidationError(ValueError):
    """Raised when a record violates the routing constraints."""


class Weekday(enum.IntEnum):
    Mon = 0
    Tue = 1
    Wed = 2
    Thu = 3
    Fri = 4
    Sat = 5
    Sun = 6

    @classmethod
    def parse(cls, value: "str | int | Weekday") -> "Weekday":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value[:3].capitalize()]
            except KeyError:
                raise HistoryFormatError(f"unknown weekday {value!r}") from None
        return cls(int(value))


@dataclass(frozen=True)
class RoutingInstance:
    """One day's routing problem."""

    timestamp: int
    weekday: Weekday
    active_stops: tuple[int, ...]
    demands: dict[int, int]
    vehicle_count: int
    capacity: int

    def __post_init__(self):
        object.__setattr__(self, "weekday", Weekday.parse(self.weekday))
        object.__setattr__(self, "active_stops", tuple(sorted(set(self.active_stops))))
        object.__setattr__(self, "demands", {int(k): int(v) for k, v in self.demands.items()})

    @property
    def nodes(self) -> tuple[int, ...]:
        """Depot followed by the active stops, in increasing id order."""
        return (DEPOT,) + self.active_stops

    @property
    def n_stops(self) -> int:
        return len(self.active_stops)

    def demand(self, s: int) -> int:
        return self.demands.get(s, 0)

    @property
    def total_demand(self) -> int:
        return sum(self.demand(s) for s in self.active_stops)

    def problems(self) -> list[str]:
        """Instance-level inconsistencies (empty when the instance is well formed)."""
        out = []
        if DEPOT in self.active_stops:
            out.append("depot listed as an active stop")
        for s in self.demands:
            if s not in self.active_stops:
                out.append(f"stop {s} has a demand but is not active")
        for s in self.active_stops:
            q = self.demand(s)
            if q < 0:
                out.append(f"stop {s} has negative demand {q}")
            if q > self.capacity:
                out.append(f"stop {s} demand {q} > Q={self.capacity}")
        if self.vehicle_count < 1:
            out.append(f"vehicle count {self.vehicle_count} < 1")
        if self.capacity <= 0:
            out.append(f"capacity {self.capacity} <= 0")
        if self.total_demand > self.vehicle_count * self.capacity:
            out.append(
                f"total demand {self.total_demand} > m*Q={self.vehicle_count * self.capacity}"
            )
        return out

    def to_dict(self) -> dict:
        return {
            "t": self.timestamp,
            "weekday": self.weekday.name,
            "vehicles": self.vehicle_count,
            "capacity": self.capacity,
            "demands": {str(s): self.demand(s) for s in self.active_stops},
        }

    @classmethod
    def from_dict(cls, d: dict, capacity: int | None = None) -> "RoutingInstance":
        try:
            cap = d["capacity"] if capacity is None else capacity
            demands = {int(k): int(v) for k, v in d["demands"].items()}
            return cls(
                timestamp=int(d["t"]),
                weekday=Weekday.parse(d["weekday"]),
                active_stops=tuple(demands),
                demands=demands,
                vehicle_count=int(d["vehicles"]),
                capacity=int(cap),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, HistoryFormatError):
                raise
            raise HistoryFormatError(f"malformed instance: {exc!r}") from exc


@dataclass(frozen=True)
class Routing:
    """A set of directed arcs; equivalently a binary incidence matrix."""

    arcs: frozenset[Arc]

    @classmethod
    def from_tours(cls, tours: Iterable[Sequence[int]]) -> "Routing":
        """Build from stop sequences that exclude the depot endpoints."""
        arcs = set()
        for tour in tours:
            path = [DEPOT, *tour, DEPOT]
            arcs.update(zip(path[:-1], path[1:]))
        return cls(frozenset(arcs))

    @classmethod
    def from_matrix(cls, x: np.ndarray, nodes: Sequence[int] | None = None) -> "Routing":
        """Build from an incidence matrix indexed by ``nodes`` (default: identity)."""
        x = np.asarray(x)
        if nodes is None:
            nodes = range(x.shape[0])
        nodes = list(nodes)
        rows, cols = np.nonzero(x > 0.5)
        return cls(frozenset((nodes[i], nodes[j]) for i, j in zip(rows, cols)))

    def matrix(self, nodes: Sequence[int]) -> np.ndarray:
        """Incidence matrix over ``nodes``; raises if an arc leaves that node set."""
        index = {v: i for i, v in enumerate(nodes)}
        x = np.zeros((len(nodes), len(nodes)))
        for s, r in self.arcs:
            if s not in index or r not in index:
                raise ValueError(f"arc ({s}, {r}) outside node set")
            x[index[s], index[r]] = 1.0
        return x

    @cached_property
    def successors(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for s, r in sorted(self.arcs):
            out.setdefault(s, []).append(r)
        return out

    @cached_property
    def tours(self) -> tuple[tuple[int, ...], ...]:
        """Depot-anchored stop sequences, sorted by first stop.

        Walks successor links from each depot out-arc. Malformed arc sets
        yield truncated walks rather than raising; use
        :func:`validate_routing` to diagnose them.
        """
        succ = self.successors
        tours = []
        for first in succ.get(DEPOT, []):
            tour, cur, seen = [], first, set()
            while cur != DEPOT and cur not in seen:
                seen.add(cur)
                tour.append(cur)
                nxt = succ.get(cur)
                if not nxt:
                    break
                cur = nxt[0]
            tours.append(tuple(tour))
        return tuple(sorted(tours))

    @property
    def stops(self) -> set[int]:
        return {v for arc in self.arcs for v in arc} - {DEPOT}


def arcs_of(x: Routing) -> set[Arc]:
    """The set of directed arcs used by ``x``."""
    return set(x.arcs)


def tour_load(inst: RoutingInstance, tour: Sequence[int]) -> int:
    return sum(inst.demand(s) for s in tour)


def validate_routing(inst: RoutingInstance, x: Routing) -> list[str]:
    """List every violated routing constraint; an empty list means feasible.

    Checks stop degrees, the fleet-size equality at the depot, per-tour load
    and connectivity to the depot. Raises ``ValueError`` when ``x`` uses a
    node outside the depot plus ``inst.active_stops``.
    """
    nodes = set(inst.nodes)
    for s, r in x.arcs:
        if s not in nodes or r not in nodes:
            bad = s if s not in nodes else r
            raise ValueError(f"routing uses stop {bad}, which is not active on day {inst.timestamp}")

    out_deg = Counter(s for s, _ in x.arcs)
    in_deg = Counter(r for _, r in x.arcs)
    violations = []
    for s, r in sorted(x.arcs):
        if s == r:
            violations.append(f"self-loop at stop {s}")
    for s in inst.active_stops:
        if out_deg[s] != 1:
            violations.append(f"stop {s} has out-degree {out_deg[s]}")
        if in_deg[s] != 1:
            violations.append(f"stop {s} has in-degree {in_deg[s]}")
    m = inst.vehicle_count
    if out_deg[DEPOT] != m:
        violations.append(f"depot out-degree {out_deg[DEPOT]} ≠ m={m}")
    if in_deg[DEPOT] != m:
        violations.append(f"depot in-degree {in_deg[DEPOT]} ≠ m={m}")

    # Walk from the depot; anything not reached sits on a detached subtour.
    reached = set()
    for tour in x.tours:
        reached.update(tour)
        load = tour_load(inst, tour)
        if load > inst.capacity:
            violations.append(f"tour load {load} > Q={inst.capacity}")
    detached = sorted(set(inst.active_stops) - reached)
    if detached:
        violations.append(f"subtour not connected to depot: stops {detached}")
    return violations


def validate_distance_matrix(d: np.ndarray) -> list[str]:
    out = []
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        return [f"distance matrix must be square, got shape {d.shape}"]
    if not np.all(np.isfinite(d)):
        out.append("distance matrix has non-finite entries")
    if np.any(d < 0):
        out.append("distance matrix has negative entries")
    if np.any(np.diag(d) != 0):
        out.append("distance matrix diagonal is not zero")
    return out


@dataclass(frozen=True, eq=False)
class HistoryDataset:
    """Chronologically ordered (instance, realized routing) records."""

    records: tuple[tuple[RoutingInstance, Routing], ...]
    distance_matrix: np.ndarray
    capacity: int
    stop_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        d = np.asarray(self.distance_matrix, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "distance_matrix", d)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def universe_size(self) -> int:
        """Number of rows/columns of every stop-indexed matrix."""
        return self.distance_matrix.shape[0]

    @cached_property
    def universe(self) -> tuple[int, ...]:
        """The depot plus every stop active on at least one day."""
        seen = {DEPOT}
        for inst, _ in self.records:
            seen.update(inst.active_stops)
        return tuple(sorted(seen))

    @property
    def instances(self) -> list[RoutingInstance]:
        return [inst for inst, _ in self.records]

    @property
    def timestamps(self) -> list[int]:
        return [inst.timestamp for inst, _ in self.records]

    def before(self, t: int) -> "HistoryDataset":
        """Records strictly earlier than ``t``."""
        return self.subset([i for i, ts in enumerate(self.timestamps) if ts < t])

    def subset(self, indices: Iterable[int]) -> "HistoryDataset":
        return HistoryDataset(
            records=tuple(self.records[i] for i in indices),
            distance_matrix=self.distance_matrix,
            capacity=self.capacity,
            stop_names=self.stop_names,
        )

    def problems(self) -> list[str]:
        out = [f"distance matrix: {p}" for p in validate_distance_matrix(self.distance_matrix)]
        n = self.universe_size
        prev = None
        for inst, x in self.records:
            where = f"day t={inst.timestamp}"
            if prev is not None and inst.timestamp <= prev:
                out.append(f"{where}: timestamps not strictly increasing")
            prev = inst.timestamp
            for s in inst.active_stops:
                if not 0 < s < n:
                    out.append(f"{where}: stop {s} outside universe of size {n}")
            out.extend(f"{where}: {p}" for p in inst.problems())
            try:
                out.extend(f"{where}: {p}" for p in validate_routing(inst, x))
            except ValueError as exc:
                out.append(f"{where}: {exc}")
        return out

    def validate(self) -> "HistoryDataset":
        problems = self.problems()
        if problems:
            raise ValidationError(problems[0])
        return self

    def to_dict(self) -> dict:
        names = self.stop_names
        days = []
        for inst, x in self.records:
            day = inst.to_dict()
            del day["capacity"]
            day["routes"] = [list(t) for t in x.tours]
            days.append(day)
        return {
            "capacity": self.capacity,
            "stops": [{"id": i, "name": names.get(i, "depot" if i == 0 else f"stop {i}")}
                      for i in range(self.universe_size)],
            "distance_matrix": self.distance_matrix.tolist(),
            "days": days,
        }

    @classmethod
    def from_dict(cls, doc: dict, validate: bool = True) -> "HistoryDataset":
        try:
            capacity = int(doc["capacity"])
            d = np.asarray(doc["distance_matrix"], dtype=float)
            names = {int(s["id"]): str(s.get("name", "")) for s in doc.get("stops", [])}
            records = []
            for day in doc["days"]:
                inst = RoutingInstance.from_dict(day, capacity=capacity)
                x = Routing.from_tours(day["routes"])
                records.append((inst, x))
        except HistoryFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise HistoryFormatError(f"malformed history document: {exc!r}") from exc
        if names and len(names) != d.shape[0]:
            raise HistoryFormatError(
                f"{len(names)} stops listed but distance matrix has {d.shape[0]} rows"
            )
        ds = cls(records=tuple(records), distance_matrix=d, capacity=capacity, stop_names=names)
        return ds.validate() if validate else ds


def load_history(path: str | Path) -> HistoryDataset:
    """Read and validate a JSON history file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise HistoryFormatError(f"{path}: {exc}") from exc
    return HistoryDataset.from_dict(doc)


def save_history(history: HistoryDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(history.to_dict(), indent=1))


def load_instance(path: str | Path) -> RoutingInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise HistoryFormatError(f"{path}: {exc}") from exc
    inst = RoutingInstance.from_dict(doc)
    problems = inst.problems()
    if problems:
        raise ValidationError(problems[0])
    return inst
