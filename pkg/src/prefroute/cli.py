"""prefroute: routing that learns planner preferences from past routes.

Exit codes: 0 on success, 2 on invalid input, 3 when no feasible routing exists.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .core import HistoryDataset, Routing, RoutingInstance, load_history, load_instance, save_history
from .dfl import DflConfig, dfl_train
from .dot import routing_to_dot
from .evaluation import ESTIMATORS, EvalConfig, rolling_evaluation
from .experiment import ExperimentError, bundled_config, parse_config, run_experiment
from .markov import (
    WeekdayMarkovCache,
    WeightingScheme,
    load_matrix,
    markov_probabilities,
    save_matrix,
    transition_counts,
)
from .neural import FEATURE_GROUPS, TrainConfig, load_models, predict_matrix, save_models, train_models
from .solver import InfeasibleError, mle_routing
from .synth import SynthConfig, synth_generate

log = logging.getLogger("prefroute")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text)
    else:
        print(text)


def _pick_day(history: HistoryDataset, args) -> RoutingInstance:
    if getattr(args, "instance", None):
        return load_instance(args.instance)
    if args.day is None:
        raise ValueError("give --instance or --day")
    for inst, _ in history.records:
        if inst.timestamp == args.day:
            return inst
    raise ValueError(f"no record with t={args.day}")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    fields = _read_json(args.config)
    overrides = {
        "universe_size": args.universe_size, "mean_active": args.mean_active,
        "vehicles_mean": args.vehicles, "weeks": args.weeks,
        "weekday_pattern_strength": args.pattern, "noise": args.noise,
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    fields["seed"] = args.seed
    history = synth_generate(SynthConfig(**fields))
    save_history(history, args.out)
    log.info("wrote %d days to %s", len(history), args.out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    fields = _read_json(args.config).get("train", {}) if args.config else {}
    if args.lr is not None:
        fields["learning_rate"] = args.lr
    if args.epochs is not None:
        fields["epochs"] = args.epochs
    if args.features:
        fields["features"] = [f for f in args.features.split(",") if f]
    fields["seed"] = args.seed
    return TrainConfig.from_dict(fields)


def cmd_train(args) -> int:
    history = load_history(args.history)
    cfg = _train_config(args)
    if args.mode == "ce":
        models = train_models(history, cfg)
    else:
        dfields = _read_json(args.config).get("dfl", {}) if args.config else {}
        if args.lam is not None:
            dfields["lam"] = args.lam
        if args.loss:
            dfields["loss_kind"] = args.loss
        if args.epochs is not None:
            dfields["epochs"] = args.epochs
        if args.lr is not None:
            dfields["learning_rate"] = args.lr
        models = dfl_train(history, DflConfig(**dfields), cfg)
    save_models(models, cfg, args.out)
    log.info("wrote %d models to %s", len(models), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    history = load_history(args.history)
    inst = _pick_day(history, args)
    past = history.before(inst.timestamp)
    if args.estimator == "neural":
        if not args.models:
            raise ValueError("--models is required for the neural estimator")
        models, cfg = load_models(args.models)
        p = predict_matrix(models, past, inst, cfg, WeekdayMarkovCache(past))
    else:
        scheme = WeightingScheme(args.weighting, args.half_life)
        day_filter = "allday" if args.estimator == "markov_allday" else inst.weekday
        p = markov_probabilities(transition_counts(past, day_filter, scheme, upto=inst.timestamp))
    if args.out:
        save_matrix(p, args.out)
    else:
        print(json.dumps({"labels": list(range(p.shape[0])), "matrix": p.tolist()}))
    return EXIT_OK


def cmd_solve(args) -> int:
    p = load_matrix(args.matrix)
    inst = load_instance(args.instance)
    if max(inst.active_stops) >= p.shape[0]:
        raise ValueError("instance mentions stops outside the matrix")
    rep = mle_routing(p, inst, args.backend, seed=args.seed, time_limit=args.time_limit)
    _emit(rep.to_dict(), args.out)
    if args.dot:
        Path(args.dot).write_text(routing_to_dot(rep.routing, name=f"t{inst.timestamp}", p=p))
    return EXIT_OK


def cmd_eval(args) -> int:
    history = load_history(args.history)
    config = _read_json(args.config)
    config["seed"] = args.seed
    ev: EvalConfig = parse_config(config)["eval"]
    if args.weighting:
        ev = dataclasses.replace(ev, weighting=WeightingScheme(args.weighting, args.half_life))
    models = load_models(args.models)[0] if args.models else None
    rep = rolling_evaluation(history, args.estimator, ev, models=models)
    rep.save(args.report, args.csv)
    agg = rep.overall
    print(f"{args.estimator}: AD {agg['AD_abs']:.2f} ({agg['AD_pct']:.2f}%)  "
          f"RD {agg['RD_abs']:.2f} ({agg['RD_pct']:.2f}%)  CE {agg['CE']:.3f}  "
          f"distance {agg['distance_km']:.1f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _read_json(args.config) if args.config else bundled_config("small")
    if args.seed is not None:
        config["seed"] = args.seed
    bundle = run_experiment(config, args.out)
    print((Path(args.out) / "summary.txt").read_text())
    log.info("outputs in %s", args.out)
    return EXIT_OK if bundle else EXIT_INVALID


def cmd_export_dot(args) -> int:
    if args.report:
        doc = _read_json(args.report)
        x = Routing.from_tours(doc["routes"])
        text = routing_to_dot(x, name=Path(args.report).stem)
    else:
        history = load_history(args.history)
        rec = next((r for r in history.records if r[0].timestamp == args.day), None)
        if rec is None:
            raise ValueError(f"no record with t={args.day}")
        text = routing_to_dot(rec[1], name=f"t{args.day}", stop_names=history.stop_names)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefroute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, seed_default=0):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=seed_default)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic history")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON object of generator fields")
    p.add_argument("--universe-size", type=int)
    p.add_argument("--mean-active", type=int)
    p.add_argument("--vehicles", type=int)
    p.add_argument("--weeks", type=int)
    p.add_argument("--pattern", type=float, help="weekday pattern strength in [0, 1]")
    p.add_argument("--noise", type=float)

    p = add("train", cmd_train, "train per-stop models")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--mode", choices=("ce", "dfl"), default="ce")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--loss", choices=("relu", "squared"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--features", help=f"comma-separated subset of {','.join(FEATURE_GROUPS)}")
    p.add_argument("--config", help="experiment-style JSON with 'train'/'dfl' sections")

    p = add("predict", cmd_predict, "predict a transition matrix for one day")
    p.add_argument("--history", required=True)
    p.add_argument("--estimator", choices=("markov", "markov_allday", "neural"), default="markov")
    p.add_argument("--models")
    p.add_argument("--instance", help="day JSON; alternatively --day")
    p.add_argument("--day", type=int, help="timestamp of a history record")
    p.add_argument("--weighting", choices=("uniform", "exponential"), default="uniform")
    p.add_argument("--half-life", type=float, default=8.0)
    p.add_argument("--out")

    p = add("solve", cmd_solve, "maximum-likelihood routing for one instance")
    p.add_argument("--matrix", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--backend", choices=("exact", "heuristic", "auto"), default="auto")
    p.add_argument("--time-limit", type=float, default=2.0)
    p.add_argument("--dot")
    p.add_argument("--out")

    p = add("eval", cmd_eval, "rolling-window evaluation of one estimator")
    p.add_argument("--estimator", choices=ESTIMATORS, required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--models", help="use these models instead of training")
    p.add_argument("--config", help="experiment-style JSON with train/dfl/eval sections")
    p.add_argument("--weighting", choices=("uniform", "exponential"))
    p.add_argument("--half-life", type=float, default=8.0)

    p = add("experiment", cmd_experiment, "run the full comparison", seed_default=None)
    p.add_argument("--config", help="experiment JSON (default: bundled small config)")
    p.add_argument("--out", default="experiment_out")

    p = add("export-dot", cmd_export_dot, "write a routing as a DOT graph")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--report", help="solve report JSON")
    src.add_argument("--history")
    p.add_argument("--day", type=int)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if isinstance(exc.__cause__, InfeasibleError) else EXIT_INVALID
    except (ValueError, KeyError, TypeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
