"""Acceptance criteria 1-8 (criterion 9 runs only when a dataset is supplied).

Each test prints one ``criterion N: PASS|FAIL`` line with its wall time and
fails if the check or the time limit is violated.
"""
import contextlib
import doctest
import math
import os
import time

import numpy as np
import pytest

from prefroute import evaluation
from prefroute.core import Routing, RoutingInstance, Weekday, load_history, validate_routing
from prefroute.dfl import DflConfig, DflState, dfl_gradient, dfl_train, perturbed_costs, _solve_global
from prefroute.evaluation import EvalConfig, arc_difference, rolling_evaluation, route_difference
from prefroute.experiment import bundled_config, run_experiment
from prefroute.markov import (
    WeightingScheme,
    WeekdayMarkovCache,
    distance_probabilities,
    markov_probabilities,
    transition_counts,
)
from prefroute.neural import (
    FEATURE_GROUPS,
    ArcModelParams,
    FeatureBundle,
    TrainConfig,
    backward,
    build_features,
    ce_loss,
    ce_score_grad,
    forward,
    train_models,
)
from prefroute.solver import (
    InfeasibleError,
    brute_force_costs,
    brute_force_routing,
    cost_matrix,
    mle_routing,
)
from prefroute.synth import SynthConfig, synth_generate

from conftest import make_history, random_instance, random_stochastic

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(capsys, number: int, title: str, limit_s: float):
    t0 = time.perf_counter()
    status, detail = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - t0
        if elapsed >= limit_s:
            detail = f" (time limit {limit_s:g}s exceeded)"
            raise AssertionError(f"criterion {number} took {elapsed:.1f}s >= {limit_s:g}s")
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - t0
        with capsys.disabled():
            print(f"\ncriterion {number}: {status}  {title}  [{elapsed:.1f}s / {limit_s:g}s]{detail}")


# -------------------------------------------------------------- criterion 1


def test_criterion_1_exact_matches_brute_force(capsys):
    rng = np.random.default_rng(2024)
    with criterion(capsys, 1, "exact solver == brute force on 200 instances", 60):
        checked = 0
        while checked < 200:
            inst = random_instance(rng, 3, 8, 3)
            p = random_stochastic(rng, inst.n_stops + 1, float(rng.uniform(0.2, 2.0)))
            try:
                bf = brute_force_routing(p, inst)
            except InfeasibleError:
                with pytest.raises(InfeasibleError):
                    mle_routing(p, inst, "exact")
                continue
            ex = mle_routing(p, inst, "exact")
            assert ex.objective == bf.objective, (inst, ex.objective, bf.objective)
            assert ex.optimal
            assert validate_routing(inst, ex.routing) == []
            checked += 1


# -------------------------------------------------------------- criterion 2


def _local(inst: RoutingInstance, d: np.ndarray) -> np.ndarray:
    nodes = np.asarray(inst.nodes)
    c = d[np.ix_(nodes, nodes)].astype(float)
    np.fill_diagonal(c, np.inf)
    return c


def test_criterion_2_distance_equivalence(capsys):
    rng = np.random.default_rng(77)
    with criterion(capsys, 2, "distance-softmax MLE argmin == min-distance argmin", 30):
        ties = 0
        for k in range(50):
            inst = random_instance(rng, 3, 7, 3)
            n = inst.n_stops + 1
            if k % 2:
                # integer distances on a grid produce tied optima
                pts = rng.integers(0, 3, size=(n, 2))
                d = np.abs(pts[:, None, :] - pts[None, :, :]).sum(-1).astype(float)
            else:
                pts = rng.uniform(0, 5, size=(n, 2))
                d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
            try:
                _, _, by_dist = brute_force_costs(_local(inst, d), inst, tol=1e-9)
            except InfeasibleError:
                continue
            c = cost_matrix(distance_probabilities(d), inst, eps=0.0)
            _, _, by_mle = brute_force_costs(c, inst, tol=1e-9)
            assert by_mle == by_dist
            assert frozenset(mle_routing(distance_probabilities(d), inst, "exact", eps=0.0).routing.arcs) in by_dist
            ties += len(by_dist) > 1
        assert ties > 0, "no tied instance exercised set equality"


# -------------------------------------------------------------- criterion 3


def _naive_counts(history, wd, scheme, upto):
    n = history.universe_size
    f = np.zeros((n, n))
    chosen = [x for inst, x in history.records
              if inst.timestamp < upto and (wd is None or inst.weekday == wd)]
    for age, x in enumerate(reversed(chosen)):
        w = 1.0 if scheme.kind == "uniform" else 2.0 ** (-age / scheme.half_life)
        for tour in x.tours:
            path = [0, *tour, 0]
            for a, b in zip(path, path[1:]):
                f[a, b] += w
    p = np.zeros((n, n))
    for s in range(n):
        if f[s].sum() > 0:
            p[s] = f[s] / f[s].sum()
        else:
            p[s] = [0.0 if r == s else 1.0 / (n - 1) for r in range(n)]
    return f, p


def test_criterion_3_markov_oracle(capsys):
    histories = [
        synth_generate(SynthConfig(universe_size=int(6 + k % 5), mean_active=3 + k % 3,
                                   vehicles_mean=1 + k % 2, weeks=3, seed=k, heuristic_iters=20))
        for k in range(20)
    ]
    with criterion(capsys, 3, "Markov counts == naive re-scan on 20 histories", 5):
        rng = np.random.default_rng(3)
        for k, h in enumerate(histories):
            scheme = WeightingScheme("exponential", 4.0) if k % 2 else WeightingScheme()
            last = h.records[-1][0].timestamp + 1
            for upto in (0, int(rng.integers(1, last)), last):
                for wd in (None, Weekday(int(rng.integers(7)))):
                    f = transition_counts(h, "allday" if wd is None else wd, scheme, upto=upto)
                    f_ref, p_ref = _naive_counts(h, wd, scheme, upto)
                    np.testing.assert_allclose(f, f_ref, rtol=1e-12, atol=1e-12)
                    p = markov_probabilities(f)
                    np.testing.assert_allclose(p, p_ref, rtol=1e-12, atol=1e-12)
                    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)


# -------------------------------------------------------------- criterion 4


def _random_case(rng):
    n = int(rng.integers(3, 9))
    lookback = int(rng.integers(1, 5))
    features = frozenset(f for f in FEATURE_GROUPS if rng.random() < 0.7) or frozenset({"markov"})
    params = ArcModelParams(int(rng.integers(n)), n, lookback,
                            weekday_dim=int(rng.integers(1, 5)), stop_dim=int(rng.integers(1, 7)))
    params.theta[:] = rng.normal(0, 0.7, params.size)
    s = params.source
    p = rng.dirichlet(np.ones(n))
    p[s] = 0
    p /= p.sum()
    active = rng.random(n) < 0.6
    active[0] = False
    fb = FeatureBundle(
        source=s, lagged=rng.random((lookback, n)), markov_logp=np.log(p + 1e-6),
        dist_logit=-rng.uniform(0, 3, n), weekday=int(rng.integers(7)), active_mask=active,
        vehicle_count=float(rng.integers(1, 5)), features=features,
    )
    x = np.zeros(n)
    others = [r for r in range(n) if r != s]
    x[rng.choice(others, size=int(rng.integers(1, 3)) if s == 0 else 1, replace=False)] = 1
    return params, fb, x


def test_criterion_4_gradients(capsys):
    rng = np.random.default_rng(4)
    h = 1e-5
    with criterion(capsys, 4, "analytic gradients == central differences, 20 configs", 10):
        for _ in range(20):
            params, fb, x = _random_case(rng)
            p, parts = forward(params, fb, return_cache=True)
            g = backward(params, fb, parts, ce_score_grad(p, x))
            num = np.zeros_like(g)
            for i in range(params.size):
                old = params.theta[i]
                params.theta[i] = old + h
                up = ce_loss(forward(params, fb), x)
                params.theta[i] = old - h
                down = ce_loss(forward(params, fb), x)
                params.theta[i] = old
                num[i] = (up - down) / (2 * h)
            for name in params.shapes:
                a, b = params.view(name, g), params.view(name, num)
                scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0))
                # relative error, with a floor for groups whose exact gradient is 0
                assert np.abs(a - b).max(initial=0) <= 1e-4 * max(scale, 1e-3), name


# -------------------------------------------------------------- criterion 5


def test_criterion_5_learning_sanity(capsys):
    with criterion(capsys, 5, "learned Pr(true successor) >= 0.9 and rolling AD = 0", 120):
        # every stop active on 10 days, always in the order 0 -> 2 -> 4 -> 1 -> 3 -> 0
        tour = [2, 4, 1, 3]
        h = make_history([[tour]] * 10, 4)
        cfg = TrainConfig()
        models = train_models(h, cfg)
        nxt = RoutingInstance(10, Weekday(3), (1, 2, 3, 4), {s: 1 for s in range(1, 5)}, 1, 10)
        p_markov = WeekdayMarkovCache(h).matrix(10, nxt.weekday)
        path = [0, *tour, 0]
        for s, r in zip(path, path[1:]):
            p = forward(models[s], build_features(h, p_markov, nxt, s, cfg))
            assert p[r] >= 0.9, (s, r, p[r])

        synth = synth_generate(SynthConfig(universe_size=12, mean_active=6, vehicles_mean=2, weeks=16,
                                           noise=0.0, weekday_pattern_strength=1.0,
                                           fixed_active=True, seed=5))
        rep = rolling_evaluation(synth, "neural", EvalConfig(train=TrainConfig(epochs=40)))
        assert rep.overall["AD_abs"] == 0, rep.overall


# -------------------------------------------------------------- criterion 6


def test_criterion_6_estimator_ordering(capsys):
    base = bundled_config("small")
    assert base["data"]["synth"]["weekday_pattern_strength"] == 0.8
    assert base["data"]["synth"]["noise"] == 0.2
    assert base["data"]["synth"]["weeks"] == 39
    with criterion(capsys, 6, "estimator ordering on the bundled config, >= 2 of 3 seeds", 600):
        held = []
        for seed in (0, 1, 2):
            cfg = {**base, "seed": seed, "ablation": False, "dfl_losses": [],
                   "estimators": ["markov_allday", "markov_weekday", "neural", "conventional"]}
            rows = {r["estimator"]: r for r in run_experiment(cfg)["comparison"]}
            ce_order = rows["neural"]["CE"] < rows["markov_weekday"]["CE"] < rows["markov_allday"]["CE"]
            conv = rows["conventional"]
            others = [rows[e] for e in ("markov_allday", "markov_weekday", "neural")]
            conv_ok = (all(conv["distance_km"] < r["distance_km"] for r in others)
                       and all(conv["AD_pct"] > r["AD_pct"] for r in others))
            with capsys.disabled():
                print(f"\n  seed {seed}: " + "  ".join(
                    f"{e} CE={r['CE']:.3f} AD%={r['AD_pct']:.1f} km={r['distance_km']:.1f}"
                    for e, r in rows.items()) + f"  -> {'holds' if ce_order and conv_ok else 'fails'}")
            held.append(ce_order and conv_ok)
        assert sum(held) >= 2, held


# -------------------------------------------------------------- criterion 7


def test_criterion_7_dfl_mechanics(capsys):
    with criterion(capsys, 7, "DFL gradient, perturbation and training fixture", 120):
        rng = np.random.default_rng(11)
        flipped = 0
        for _ in range(10):
            inst = RoutingInstance(0, Weekday.Mon, (1, 2, 3, 4, 5), {s: 1 for s in range(1, 6)}, 2, 10)
            p = random_stochastic(rng, 6, 1.0)
            pi = -np.log(p + 1e-6)
            x_hat = mle_routing(p, inst).routing
            assert not dfl_gradient(pi, x_hat, x_hat, inst, DflConfig()).any()
            tours = [list(t) for t in np.array_split(rng.permutation(np.arange(1, 6)), 2)]
            actual = Routing.from_tours([[int(s) for s in t] for t in tours])
            for kind in ("relu", "squared"):
                cfg = DflConfig(lam=float(rng.choice([0.5, 5.0, 50.0])), loss_kind=kind)
                g = dfl_gradient(pi, x_hat, actual, inst, cfg)
                x_tilde = _solve_global(perturbed_costs(pi, x_hat, actual, cfg), inst, cfg).routing
                sym = x_hat.arcs ^ x_tilde.arcs
                nz = {(int(i), int(j)) for i, j in zip(*np.nonzero(g))}
                assert nz == sym
                for i, j in nz:
                    assert g[i, j] == pytest.approx((1 if (i, j) in x_tilde.arcs else -1) / cfg.lam, abs=0)
                flipped += bool(nz)
            tilde = perturbed_costs(pi, x_hat, actual, DflConfig(loss_kind="relu", lam=3.0))
            assert np.all(tilde <= pi)
        assert flipped > 0

        d = np.array([[0, 1, 2, 3], [1, 0, 1, 2], [2, 1, 0, 1], [3, 2, 1, 0]], float)
        h = make_history([[[2, 1, 3]]] * 14, 3, d=d)
        state = DflState()
        dfl_train(h, DflConfig(epochs=30), TrainConfig(), state=state)
        assert min(state.train_ad) == 0.0 and state.train_ad[-1] == 0.0, state.train_ad


# -------------------------------------------------------------- criterion 8


def test_criterion_8_metric_fixtures(capsys):
    with criterion(capsys, 8, "AD/RD hand-computed fixtures", 5):
        assert arc_difference(Routing.from_tours([[1, 2], [3]]), Routing.from_tours([[2, 1], [3]])) == (3, 60.0)
        assert route_difference(Routing.from_tours([[1, 2], [3]]),
                                Routing.from_tours([[1], [2, 3]])) == (1, 100 / 3)
        result = doctest.testmod(evaluation, verbose=False)
        assert result.attempted >= 2 and result.failed == 0


# -------------------------------------------------------------- criterion 9


@pytest.mark.skipif(not os.environ.get("PREFROUTE_DATASET"),
                    reason="set PREFROUTE_DATASET to a history JSON to run the dataset check")
def test_criterion_9_dataset(capsys):
    history = load_history(os.environ["PREFROUTE_DATASET"])
    with criterion(capsys, 9, "dataset AD% within 2 points of the published values", math.inf):
        cfg = {**bundled_config("small"), "ablation": False, "dfl_losses": [],
               "estimators": ["markov_weekday", "neural"]}
        rows = {r["estimator"]: r for r in run_experiment(cfg, history=history)["comparison"]}
        assert abs(rows["markov_weekday"]["AD_pct"] - 18.55) <= 2.0, rows
        assert abs(rows["neural"]["AD_pct"] - 18.04) <= 2.0, rows
