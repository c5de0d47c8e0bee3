"""Graphviz DOT export of routings."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .core import DEPOT, Routing

_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _quote(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def routing_to_dot(
    x: Routing,
    name: str = "routing",
    stop_names: Mapping[int, str] | None = None,
    p: np.ndarray | None = None,
    actual: Routing | None = None,
) -> str:
    """DOT digraph with one color per tour.

    ``p`` labels every arc with its transition probability. Arcs of
    ``actual`` missing from ``x`` are drawn dashed in grey.
    """
    lines = [f"digraph {_quote(name)} {{", "  rankdir=LR;", "  node [shape=circle];"]
    stops = sorted(x.stops | (actual.stops if actual is not None else set()))
    for s in stops:
        label = stop_names.get(s, str(s)) if stop_names else str(s)
        shape = ' shape=box' if s == DEPOT else ''
        lines.append(f"  {s} [label={_quote(label)}{shape}];")
    for k, tour in enumerate(x.tours):
        color = _COLORS[k % len(_COLORS)]
        path = [DEPOT, *tour, DEPOT]
        for a, b in zip(path, path[1:]):
            attrs = [f'color="{color}"']
            if p is not None:
                attrs.append(f'label="{p[a, b]:.2f}"')
            lines.append(f"  {a} -> {b} [{', '.join(attrs)}];")
    if actual is not None:
        for a, b in sorted(actual.arcs - x.arcs):
            lines.append(f'  {a} -> {b} [style=dashed, color="grey"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_dot(path: str | Path, x: Routing, **kwargs) -> None:
    Path(path).write_text(routing_to_dot(x, **kwargs))
