"""End-to-end experiment runner: data, estimators, tables and DOT figures.

A config is one JSON document::

    {
      "seed": 0,
      "data": {"synth": {...SynthConfig fields...}}   # or {"history": "path.json"}
      "estimators": ["markov_allday", "markov_weekday", "neural", "conventional"],
      "train": {...TrainConfig fields...},
      "dfl": {...DflConfig fields...},
      "eval": {"test_per_weekday": 7, "train_share": 0.75, "backend": "auto",
               "weighting": {"kind": "uniform", "half_life": 8}},
      "ablation": ["full", "without_past", ...] or true,
      "dfl_losses": ["relu", "squared"],
      "dfl_lambdas": [20]
    }

Every section is optional; missing fields take the library defaults.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from importlib import resources
from pathlib import Path
from typing import Any

from .core import HistoryDataset, load_history
from .dfl import DflConfig
from .dot import routing_to_dot
from .evaluation import ESTIMATORS, METRICS, EvalConfig, EvalReport, rolling_evaluation
from .markov import WeightingScheme
from .neural import ABLATIONS, TrainConfig
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """A stage of the experiment failed; the message names the stage."""


def bundled_config(name: str = "small") -> dict:
    """One of the configs shipped in ``prefroute/data``."""
    text = resources.files("prefroute").joinpath("data", f"{name}.json").read_text()
    return json.loads(text)


def _fields(cls, d: dict | None) -> dict:
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return d


def parse_config(cfg: dict) -> dict[str, Any]:
    """Typed pieces of an experiment config (raises ValueError on bad fields)."""
    seed = int(cfg.get("seed", 0))
    train = TrainConfig.from_dict({"seed": seed, **_fields(TrainConfig, cfg.get("train"))})
    dfl = DflConfig(**_fields(DflConfig, cfg.get("dfl")))
    ev = dict(cfg.get("eval", {}))
    weighting = WeightingScheme(**ev.pop("weighting", {}))
    ev = _fields(EvalConfig, ev)
    for key in ("train", "dfl"):
        ev.pop(key, None)
    eval_cfg = EvalConfig(weighting=weighting, train=train, dfl=dfl, seed=seed, **ev)
    estimators = list(cfg.get("estimators", ["markov_allday", "markov_weekday", "neural", "conventional"]))
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ValueError(f"unknown estimators {bad}")
    ablation = cfg.get("ablation", False)
    if ablation is True:
        ablation = list(ABLATIONS)
    elif not ablation:
        ablation = []
    bad = [a for a in ablation if a not in ABLATIONS]
    if bad:
        raise ValueError(f"unknown ablation configs {bad}")
    data = cfg.get("data", {"synth": {}})
    synth = None
    if "history" not in data:
        synth = SynthConfig(**{"seed": seed, **_fields(SynthConfig, data.get("synth"))})
    return {
        "seed": seed,
        "eval": eval_cfg,
        "estimators": estimators,
        "ablation": list(ablation),
        "dfl_losses": list(cfg.get("dfl_losses", [])),
        "dfl_lambdas": [float(v) for v in cfg.get("dfl_lambdas", [dfl.lam])],
        "synth": synth,
        "history_path": data.get("history"),
    }


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, ExperimentError):
            raise ExperimentError(f"stage '{self.name}' failed: {exc}") from exc
        log.info("stage %s done in %.1fs", self.name, time.perf_counter() - self.t0)
        return False


def _row(label: str, report: EvalReport) -> dict:
    return {"estimator": label, **{k: report.overall[k] for k in METRICS}}


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def format_table(rows: list[dict], digits: int = 2) -> str:
    """Fixed-width text rendering of a list of same-keyed dicts."""
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[f"{r[c]:.{digits}f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def run_experiment(config: dict | str | Path, out_dir: str | Path | None = None,
                   history: HistoryDataset | None = None) -> dict:
    """Run every configured estimator and assemble the comparison tables.

    Returns a bundle with ``comparison``, ``per_weekday``, ``ablation`` and
    ``dfl`` tables (lists of dicts), the per-estimator reports, and the DOT
    source for one sample test day per estimator. With ``out_dir`` the
    bundle is also written there as JSON, CSV and ``.dot`` files.
    """
    if not isinstance(config, dict):
        config = json.loads(Path(config).read_text())
    with _Stage("config"):
        cfg = parse_config(config)
    ev: EvalConfig = cfg["eval"]

    with _Stage("data"):
        if history is None:
            if cfg["history_path"]:
                history = load_history(cfg["history_path"])
            else:
                history, _ = generate(cfg["synth"])

    reports: dict[str, EvalReport] = {}
    for est in cfg["estimators"]:
        with _Stage(f"estimator {est}"):
            reports[est] = rolling_evaluation(history, est, ev)
    comparison = [_row(e, r) for e, r in reports.items()]

    per_weekday = []
    for est, rep in reports.items():
        for wd, agg in rep.per_weekday.items():
            per_weekday.append({"estimator": est, "weekday": wd, "n": agg["n"],
                                **{k: agg[k] for k in METRICS}})

    ablation = []
    for name in cfg["ablation"]:
        with _Stage(f"ablation {name}"):
            tcfg = dataclasses.replace(ev.train, features=ABLATIONS[name])
            rep = rolling_evaluation(history, "neural", dataclasses.replace(ev, train=tcfg))
            ablation.append(_row(name, rep))

    dfl_rows = []
    for loss in cfg["dfl_losses"]:
        for lam in cfg["dfl_lambdas"]:
            with _Stage(f"dfl {loss} lambda={lam}"):
                dcfg = dataclasses.replace(ev.dfl, loss_kind=loss, lam=lam)
                rep = rolling_evaluation(history, "dfl", dataclasses.replace(ev, dfl=dcfg))
                dfl_rows.append({"loss": loss, "lambda": lam, **_row(f"dfl_{loss}", rep)})
                reports.setdefault(f"dfl_{loss}_{lam:g}", rep)

    dots = {}
    if reports:
        with _Stage("dot export"):
            first = next(iter(reports.values()))
            t = first.per_instance[0].timestamp
            inst, actual = next(r for r in history.records if r[0].timestamp == t)
            dots["actual"] = routing_to_dot(actual, name=f"actual_t{t}", stop_names=history.stop_names)
            for est, rep in reports.items():
                dots[est] = routing_to_dot(rep.predictions[t], name=f"{est}_t{t}",
                                           stop_names=history.stop_names, actual=actual)

    bundle = {
        "config": config,
        "n_records": len(history.records),
        "comparison": comparison,
        "per_weekday": per_weekday,
        "ablation": ablation,
        "dfl": dfl_rows,
        "reports": {e: r.to_dict() for e, r in reports.items()},
        "dot": dots,
    }
    if out_dir is not None:
        with _Stage("write outputs"):
            write_bundle(bundle, out_dir)
    return bundle


def write_bundle(bundle: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "dot").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps({k: v for k, v in bundle.items() if k != "dot"}, indent=2))
    for key in ("comparison", "per_weekday", "ablation", "dfl"):
        _write_csv(out / f"{key}.csv", bundle[key])
    for name, text in bundle["dot"].items():
        (out / "dot" / f"{name}.dot").write_text(text)
    summary = []
    for key, title in (("comparison", "Estimator comparison"), ("per_weekday", "Per weekday"),
                       ("ablation", "Feature ablation (neural)"), ("dfl", "Decision-focused learning")):
        if bundle[key]:
            summary += [title, format_table(bundle[key]), ""]
    (out / "summary.txt").write_text("\n".join(summary))
