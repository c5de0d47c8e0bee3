"""Decision-focused training of the per-source models through the router.

The task loss compares the realized routing with the maximum-likelihood
routing under the predicted matrix. Its gradient with respect to the arc
costs ``pi = -log P`` is obtained by solving a second, perturbed problem:

    pi_tilde = pi_hat + lam * dL/dX_hat
    grad_pi  = -(1 / lam) * (X_hat - X_tilde)

Row ``s`` of that gradient is pushed through ``-log(p + eps)`` and the
softmax of source ``s``'s model, then through the model itself.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Literal, Mapping

import numpy as np

from .core import HistoryDataset, Routing, RoutingInstance
from .markov import WeekdayMarkovCache
from .neural import (
    ArcModelParams,
    TrainConfig,
    backward,
    build_features,
    forward,
    make_optimizer,
)
from .solver import SolveReport, solve_costs

log = logging.getLogger(__name__)

LossKind = Literal["relu", "squared"]


@dataclass(frozen=True)
class DflConfig:
    lam: float = 20.0
    loss_kind: LossKind = "relu"
    epochs: int = 30
    learning_rate: float = 0.1
    backend: str = "auto"
    eps: float = 1e-6
    max_iter: int = 300  # heuristic budget when the exact backend is not used

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.loss_kind not in ("relu", "squared"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair_matrices(x_actual: Routing, x_pred: Routing, n: int | None):
    nodes = sorted(x_actual.stops | x_pred.stops)
    size = (max(nodes) + 1) if n is None else n
    if nodes and nodes[-1] >= size:
        raise ValueError(f"routing mentions stop {nodes[-1]} outside a {size}-stop universe")
    idx = list(range(size))
    return x_actual.matrix(idx), x_pred.matrix(idx)


def task_loss(x_actual: Routing, x_pred: Routing, kind: LossKind = "relu", n: int | None = None) -> float:
    """Relu: arcs of ``x_actual`` missing from ``x_pred``. Squared: sum of squared entry differences."""
    a, p = _pair_matrices(x_actual, x_pred, n)
    if kind == "relu":
        return float(np.maximum(a - p, 0).sum())
    if kind == "squared":
        return float(((a - p) ** 2).sum())
    raise ValueError(f"unknown loss kind {kind!r}")


def task_loss_grad(x_actual: Routing, x_pred: Routing, kind: LossKind = "relu", n: int | None = None) -> np.ndarray:
    """``dL/dX_hat`` as a dense ``(n, n)`` matrix."""
    a, p = _pair_matrices(x_actual, x_pred, n)
    if kind == "relu":
        return np.where(p < a, -1.0, 0.0)
    if kind == "squared":
        return -2.0 * (a - p)
    raise ValueError(f"unknown loss kind {kind!r}")


def _solve_global(pi: np.ndarray, inst: RoutingInstance, cfg: DflConfig) -> SolveReport:
    nodes = np.asarray(inst.nodes)
    c = np.array(pi[np.ix_(nodes, nodes)], dtype=float)
    np.fill_diagonal(c, np.inf)
    return solve_costs(c, inst, cfg.backend, max_iter=cfg.max_iter, time_limit=math.inf)


def perturbed_costs(pi_hat: np.ndarray, x_hat: Routing, x_actual: Routing, cfg: DflConfig) -> np.ndarray:
    """``pi_hat + lam * dL/dX_hat``."""
    n = pi_hat.shape[0]
    return pi_hat + cfg.lam * task_loss_grad(x_actual, x_hat, cfg.loss_kind, n)


def dfl_gradient(
    pi_hat: np.ndarray,
    x_hat: Routing,
    x_actual: Routing,
    inst: RoutingInstance,
    cfg: DflConfig,
    solve: Callable[[np.ndarray, RoutingInstance], SolveReport] | None = None,
) -> np.ndarray:
    """Interpolation gradient of the task loss with respect to the arc costs.

    Entries are zero outside the symmetric difference of ``x_hat`` and the
    perturbed solution, and ``+-1/lam`` on it. At the fixed point
    ``x_hat == x_actual`` the perturbed problem equals the original and the
    result is zero.
    """
    n = pi_hat.shape[0]
    solve = solve or (lambda c, i: _solve_global(c, i, cfg))
    pi_tilde = perturbed_costs(pi_hat, x_hat, x_actual, cfg)
    x_tilde = solve(pi_tilde, inst).routing
    idx = list(range(n))
    return -(x_hat.matrix(idx) - x_tilde.matrix(idx)) / cfg.lam


def score_gradient(grad_pi_row: np.ndarray, p: np.ndarray, eps: float) -> np.ndarray:
    """Pull ``dL/dpi[s, :]`` back to the softmax input scores of source ``s``.

    With ``pi = -log(p + eps)`` and ``p = softmax(score)``::

        dL/dscore_k = -h_k + p_k * sum(h),   h_r = g_r * p_r / (p_r + eps)
    """
    h = grad_pi_row * p / (p + eps)
    return -h + p * h.sum()


@dataclass
class DflState:
    """Running counters exposed for tests and logging."""

    solver_calls: int = 0
    train_ad: list | None = None


def _ad(x_actual: Routing, x_pred: Routing) -> float:
    return 100.0 * len(x_actual.arcs - x_pred.arcs) / max(len(x_actual.arcs), 1)


def dfl_train(
    history: HistoryDataset,
    cfg: DflConfig,
    train_cfg: TrainConfig,
    markov: WeekdayMarkovCache | None = None,
    models: Mapping[int, ArcModelParams] | None = None,
    state: DflState | None = None,
) -> dict[int, ArcModelParams]:
    """Train one model per stop by decision-focused learning.

    Models start from ``models`` if given (copied), else from the usual
    random initialization. Every epoch visits the days in chronological
    order, solves twice per day and takes one optimizer step per source
    model whose score gradient is nonzero. The per-epoch mean training AD
    (percent) is stored in each model's ``meta["train_ad"]`` and in
    ``state.train_ad``.
    """
    if not history.records:
        raise ValueError("empty history")
    markov = markov if markov is not None else WeekdayMarkovCache(history, filtered=True)
    state = state if state is not None else DflState()
    state.train_ad = []
    n = history.universe_size
    if models is None:
        params = {s: ArcModelParams.initialize(s, n, train_cfg) for s in history.universe}
    else:
        params = {s: m.copy() for s, m in models.items()}
    opts = {s: make_optimizer(m, train_cfg) for s, m in params.items()}
    for opt in opts.values():
        opt.lr = cfg.learning_rate
    grad = {s: np.zeros(m.size) for s, m in params.items()}

    def solve(pi, inst):
        state.solver_calls += 1
        return _solve_global(pi, inst, cfg)

    examples = []
    for inst, x in history.records:
        p_markov = markov.matrix(inst.timestamp, inst.weekday)
        feats = {s: build_features(history, p_markov, inst, s, train_cfg) for s in inst.nodes}
        examples.append((inst, x, feats))

    for epoch in range(cfg.epochs):
        ads = []
        for inst, x_actual, feats in examples:
            p_hat = np.zeros((n, n))
            caches = {}
            for s in inst.nodes:
                p_hat[s], caches[s] = forward(params[s], feats[s], return_cache=True)
            pi_hat = -np.log(p_hat + cfg.eps)
            x_hat = solve(pi_hat, inst).routing
            ads.append(_ad(x_actual, x_hat))
            g_pi = dfl_gradient(pi_hat, x_hat, x_actual, inst, cfg, solve)
            if not np.any(g_pi):
                continue
            for s in inst.nodes:
                if not np.any(g_pi[s]):
                    continue
                dscore = score_gradient(g_pi[s], p_hat[s], cfg.eps)
                backward(params[s], feats[s], caches[s], dscore, out=grad[s])
                opts[s].step(params[s].theta, grad[s])
        state.train_ad.append(float(np.mean(ads)))
        log.debug("dfl epoch %d: train AD %.2f%%", epoch, state.train_ad[-1])
    for m in params.values():
        m.meta = {**m.meta, "train_ad": list(state.train_ad), "dfl_config": cfg.to_dict()}
    return params


__all__ = [
    "DflConfig", "DflState", "dfl_gradient", "dfl_train", "perturbed_costs",
    "score_gradient", "task_loss", "task_loss_grad",
]
