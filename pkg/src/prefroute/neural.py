"""Per-source-stop neural estimator of transition probabilities.

Each source stop ``s`` owns a small model that scores every destination ``r``:

    score[r] = w_markov * log(P_markov[s, r] + eps)
             + w_dist * (-d[s, r])
             + sum_l lag_weights[l] * lagged[l, r]
             + <stop_embedding[r], h>
             + bias

where the context vector ``h`` is a linear map of the weekday embedding, the
vehicle count and the fraction of active stops, plus the mean embedding of
the day's active stops. A softmax over ``r != s`` gives ``Pr(r | s)``. The
last linear layer is shared across destinations, so the parameter count
grows only through the embedding tables.

Gradients are written out by hand and checked against finite differences in
the test suite. Parameters live in one flat vector so the optimizer is a
handful of vector operations per step.
"""
from __future__ import annotations

import json
import logging
import warnings
import weakref
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import DEPOT, HistoryDataset, RoutingInstance
from .markov import WeekdayMarkovCache

log = logging.getLogger(__name__)

FEATURE_GROUPS = ("lagged", "weekday", "stops", "vehicles", "distance", "markov")
VEH_SCALE = 0.1  # keeps the vehicle count on the scale of the embeddings
DEFAULT_FEATURES = frozenset({"weekday", "stops", "vehicles", "distance", "markov"})

# Table-1 style ablation: name -> enabled feature groups.
ABLATIONS = {
    "full": frozenset(FEATURE_GROUPS),
    "without_past": frozenset(FEATURE_GROUPS) - {"lagged"},
    "without_weekday": frozenset(FEATURE_GROUPS) - {"weekday"},
    "without_stops": frozenset(FEATURE_GROUPS) - {"stops"},
    "without_distance": frozenset(FEATURE_GROUPS) - {"distance"},
    "without_markov": frozenset(FEATURE_GROUPS) - {"markov"},
    "only_markov": frozenset({"markov"}),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    lookback: int = 5
    eps: float = 1e-6
    features: frozenset = DEFAULT_FEATURES
    weekday_dim: int = 6
    stop_dim: int = 40
    init_scale: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "features", frozenset(self.features))
        unknown = self.features - set(FEATURE_GROUPS)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lookback < 1:
            raise ValueError("lookback must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = sorted(self.features)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "features" in d:
            d["features"] = frozenset(d["features"])
        return cls(**d)


@dataclass
class FeatureBundle:
    source: int
    lagged: np.ndarray  # (L, N)
    markov_logp: np.ndarray  # (N,)
    dist_logit: np.ndarray  # (N,)
    weekday: int
    active_mask: np.ndarray  # (N,) bool
    vehicle_count: float
    features: frozenset = DEFAULT_FEATURES

    @property
    def context(self) -> np.ndarray:
        """Numeric context slots: vehicle count and active-stop fraction."""
        n = self.active_mask.shape[0]
        veh = VEH_SCALE * self.vehicle_count if "vehicles" in self.features else 0.0
        frac = self.active_mask.sum() / max(n - 1, 1) if "stops" in self.features else 0.0
        return np.array([veh, frac])


class ArcModelParams:
    """Parameters of one source-stop model, stored in a flat vector."""

    def __init__(self, source: int, n: int, lookback: int, weekday_dim: int = 6,
                 stop_dim: int = 40, theta: np.ndarray | None = None):
        self.source = source
        self.n = n
        self.lookback = lookback
        self.weekday_dim = weekday_dim
        self.stop_dim = stop_dim
        self.shapes = {
            "lag_weights": (lookback,),
            "w_markov": (),
            "w_dist": (),
            "bias": (),
            "weekday_embedding": (7, weekday_dim),
            "stop_embedding": (n, stop_dim),
            "context_map": (stop_dim, weekday_dim + 2),
        }
        self.slices = {}
        start = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start
        self.ctx_scale = 1.0 / np.sqrt(stop_dim)  # keeps the bilinear term O(1) at any width
        self.theta = np.zeros(start) if theta is None else np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (start,):
            raise ValueError(f"expected {start} parameters, got {self.theta.shape}")
        self.meta: dict = {}

    def decay_mask(self, features: Iterable[str]) -> np.ndarray:
        """Entries subject to weight decay: the embedding-path parameters in use."""
        features = set(features)
        mask = np.zeros(self.size, dtype=bool)
        wd = self.weekday_dim
        cmap = self.view("context_map", mask)
        if "weekday" in features:
            self.view("weekday_embedding", mask)[...] = True
            cmap[:, :wd] = True
        if "vehicles" in features:
            cmap[:, wd] = True
        if "stops" in features:
            cmap[:, wd + 1] = True
        if features & {"weekday", "vehicles", "stops"}:
            self.view("stop_embedding", mask)[...] = True
        return mask

    def view(self, name: str, vec: np.ndarray | None = None) -> np.ndarray:
        vec = self.theta if vec is None else vec
        return vec[self.slices[name]].reshape(self.shapes[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def copy(self) -> "ArcModelParams":
        out = ArcModelParams(self.source, self.n, self.lookback, self.weekday_dim,
                             self.stop_dim, self.theta)
        out.meta = dict(self.meta)
        return out

    @classmethod
    def initialize(cls, source: int, n: int, cfg: TrainConfig) -> "ArcModelParams":
        """Small random embeddings; the Markov weight starts at 1 when enabled."""
        p = cls(source, n, cfg.lookback, cfg.weekday_dim, cfg.stop_dim)
        rng = np.random.default_rng([cfg.seed, source])
        scale = cfg.init_scale
        p["weekday_embedding"][...] = rng.normal(0.0, scale, p.shapes["weekday_embedding"])
        p["stop_embedding"][...] = rng.normal(0.0, scale, p.shapes["stop_embedding"])
        p["context_map"][...] = rng.normal(0.0, scale, p.shapes["context_map"])
        if "markov" in cfg.features:
            p["w_markov"][...] = 1.0
        return p

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "universe_size": self.n,
            "lookback": self.lookback,
            "weekday_dim": self.weekday_dim,
            "stop_dim": self.stop_dim,
            "params": {name: self[name].tolist() for name in self.shapes},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArcModelParams":
        p = cls(int(d["source"]), int(d["universe_size"]), int(d["lookback"]),
                int(d.get("weekday_dim", 6)), int(d.get("stop_dim", 40)))
        for name, value in d["params"].items():
            p[name][...] = np.asarray(value, dtype=float)
        p.meta = dict(d.get("meta", {}))
        return p


# ---------------------------------------------------------------- features


_SOURCE_INDEX: "weakref.WeakKeyDictionary[HistoryDataset, dict]" = weakref.WeakKeyDictionary()


def _source_rows(history: HistoryDataset) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """For each source stop: timestamps of its active days and its successor rows."""
    idx = _SOURCE_INDEX.get(history)
    if idx is None:
        n = history.universe_size
        stamps: dict[int, list[int]] = {}
        rows: dict[int, list[np.ndarray]] = {}
        for inst, x in history.records:
            succ = x.successors
            for s in inst.nodes:
                row = np.zeros(n)
                row[succ.get(s, [])] = 1.0
                stamps.setdefault(s, []).append(inst.timestamp)
                rows.setdefault(s, []).append(row)
        idx = {s: (np.asarray(stamps[s]), np.vstack(rows[s])) for s in stamps}
        _SOURCE_INDEX[history] = idx
    return idx


def _uniform_row(n: int, s: int) -> np.ndarray:
    row = np.full(n, 1.0 / (n - 1))
    row[s] = 0.0
    return row


def build_features(
    history: HistoryDataset,
    p_markov: np.ndarray,
    inst: RoutingInstance,
    s: int,
    cfg: TrainConfig,
) -> FeatureBundle:
    """Inputs of source ``s``'s model on the day described by ``inst``.

    Lagged rows come from the ``cfg.lookback`` most recent days strictly
    before ``inst.timestamp`` on which ``s`` was active, most recent first;
    missing slots hold the uniform distribution. ``p_markov`` is the full
    Markov matrix valid for that day. Disabled groups are zero.
    """
    n = history.universe_size
    feats = cfg.features
    lagged = np.zeros((cfg.lookback, n))
    if "lagged" in feats:
        lagged[:] = _uniform_row(n, s)
        entry = _source_rows(history).get(s)
        if entry is not None:
            stamps, rows = entry
            k = int(np.searchsorted(stamps, inst.timestamp, side="left"))
            recent = rows[max(0, k - cfg.lookback):k][::-1]
            lagged[: len(recent)] = recent
    if "markov" in feats:
        markov_logp = np.log(np.asarray(p_markov[s], dtype=float) + cfg.eps)
    else:
        markov_logp = np.zeros(n)
    dist_logit = -history.distance_matrix[s].astype(float) if "distance" in feats else np.zeros(n)
    active = np.zeros(n, dtype=bool)
    active[list(inst.active_stops)] = True
    return FeatureBundle(
        source=s,
        lagged=lagged,
        markov_logp=markov_logp,
        dist_logit=dist_logit,
        weekday=int(inst.weekday),
        active_mask=active,
        vehicle_count=float(inst.vehicle_count),
        features=feats,
    )


# ------------------------------------------------------------- forward/backward


def _context(params: ArcModelParams, fb: FeatureBundle):
    wd = params.weekday_dim
    z = np.zeros(wd + 2)
    if "weekday" in fb.features:
        z[:wd] = params["weekday_embedding"][fb.weekday]
    z[wd:] = fb.context
    E = params["stop_embedding"]
    h = params["context_map"] @ z
    act = np.flatnonzero(fb.active_mask)
    use_stops = "stops" in fb.features and act.size > 0
    if use_stops:
        h = h + E[act].mean(axis=0)
    return z, h, act, use_stops


def scores(params: ArcModelParams, fb: FeatureBundle, _parts=None) -> np.ndarray:
    """Unnormalized scores; the source's own entry is ``-inf``."""
    z, h, act, use_stops = _parts if _parts is not None else _context(params, fb)
    E = params["stop_embedding"]
    feats = fb.features
    out = params.ctx_scale * (E @ h) + float(params["bias"])
    if "markov" in feats:
        out = out + float(params["w_markov"]) * fb.markov_logp
    if "distance" in feats:
        out = out + float(params["w_dist"]) * fb.dist_logit
    if "lagged" in feats:
        out = out + params["lag_weights"] @ fb.lagged
    out[fb.source] = -np.inf
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    top = np.max(z[np.isfinite(z)])
    e = np.exp(z - top)
    return e / e.sum()


def forward(params: ArcModelParams, fb: FeatureBundle, return_cache: bool = False):
    """Probability vector over the universe; zero at the source itself."""
    parts = _context(params, fb)
    sc = scores(params, fb, parts)
    if np.count_nonzero(np.isfinite(sc)) != sc.size - 1:
        raise FloatingPointError(f"non-finite score for source {fb.source}")
    p = softmax(sc)
    if return_cache:
        return p, parts
    return p


def backward(params: ArcModelParams, fb: FeatureBundle, parts, dscore: np.ndarray,
             out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of a loss w.r.t. the flat parameters, given its score gradient."""
    z, h, act, use_stops = parts
    g = np.zeros(params.size) if out is None else out
    g[:] = 0.0
    dscore = np.where(np.isfinite(dscore), dscore, 0.0)
    dscore[fb.source] = 0.0
    E = params["stop_embedding"]
    feats = fb.features
    if "lagged" in feats:
        params.view("lag_weights", g)[...] = fb.lagged @ dscore
    if "markov" in feats:
        params.view("w_markov", g)[...] = dscore @ fb.markov_logp
    if "distance" in feats:
        params.view("w_dist", g)[...] = dscore @ fb.dist_logit
    params.view("bias", g)[...] = dscore.sum()
    dE = params.view("stop_embedding", g)
    dE[...] = params.ctx_scale * np.outer(dscore, h)
    dh = params.ctx_scale * (E.T @ dscore)
    params.view("context_map", g)[...] = np.outer(dh, z)
    if "weekday" in fb.features:
        dz = params["context_map"].T @ dh
        params.view("weekday_embedding", g)[fb.weekday] = dz[: params.weekday_dim]
    if use_stops:
        dE[act] += dh / act.size
    return g


def ce_loss(p: np.ndarray, x_target: np.ndarray, eps: float = 1e-6) -> float:
    """``-sum_u x[u] log p[u]``; clamps zero target mass at ``eps``."""
    mask = x_target > 0
    pt = p[mask]
    if np.any(pt <= 0):
        warnings.warn("zero probability on a target successor; clamping", RuntimeWarning)
        pt = np.maximum(pt, eps)
    return float(-(x_target[mask] * np.log(pt)).sum())


def ce_score_grad(p: np.ndarray, x_target: np.ndarray) -> np.ndarray:
    """Gradient of :func:`ce_loss` w.r.t. the pre-softmax scores."""
    return x_target.sum() * p - x_target


# ----------------------------------------------------------------- optimizer


class Adam:
    """Adaptive-moment gradient descent on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(params: ArcModelParams, cfg: TrainConfig) -> Adam:
    return Adam(params.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ------------------------------------------------------------------ training


def _markov_source(history: HistoryDataset, markov) -> WeekdayMarkovCache:
    return markov if markov is not None else WeekdayMarkovCache(history, filtered=True)


def training_examples(history: HistoryDataset, s: int, cfg: TrainConfig, markov=None):
    """Feature bundles and successor targets for every day on which ``s`` is active."""
    markov = _markov_source(history, markov)
    n = history.universe_size
    out = []
    for inst, x in history.records:
        if s != DEPOT and s not in inst.active_stops:
            continue
        fb = build_features(history, markov.matrix(inst.timestamp, inst.weekday), inst, s, cfg)
        target = np.zeros(n)
        target[x.successors.get(s, [])] = 1.0
        out.append((fb, target))
    return out


def train_source_model(
    history: HistoryDataset,
    markov: WeekdayMarkovCache | None,
    s: int,
    cfg: TrainConfig,
) -> ArcModelParams:
    """Fit source ``s``'s model by online cross-entropy descent.

    Each epoch visits the days on which ``s`` was active in chronological
    order and takes one optimizer step per day. The per-epoch mean training
    loss is kept in ``params.meta["train_loss"]``.
    """
    examples = training_examples(history, s, cfg, markov)
    if not examples:
        raise ValueError(f"no training data for source {s}")
    params = ArcModelParams.initialize(s, history.universe_size, cfg)
    opt = make_optimizer(params, cfg)
    grad = np.zeros(params.size)
    decay = params.decay_mask(cfg.features)
    losses = []
    for _ in range(cfg.epochs):
        total = 0.0
        for fb, target in examples:
            p, parts = forward(params, fb, return_cache=True)
            total += ce_loss(p, target, cfg.eps)
            backward(params, fb, parts, ce_score_grad(p, target), out=grad)
            if cfg.weight_decay:
                grad[decay] += cfg.weight_decay * params.theta[decay]
            opt.step(params.theta, grad)
        losses.append(total / len(examples))
    params.meta = {"train_loss": losses, "n_days": len(examples), "config": cfg.to_dict()}
    return params


def model_sources(history: HistoryDataset) -> list[int]:
    return list(history.universe)


def train_models(
    history: HistoryDataset,
    cfg: TrainConfig,
    sources: Iterable[int] | None = None,
    markov: WeekdayMarkovCache | None = None,
) -> dict[int, ArcModelParams]:
    """Train one model per source stop (depot included)."""
    markov = _markov_source(history, markov)
    sources = model_sources(history) if sources is None else list(sources)
    models = {}
    for s in sources:
        models[s] = train_source_model(history, markov, s, cfg)
    return models


def predict_matrix(
    models: Mapping[int, ArcModelParams],
    history: HistoryDataset,
    inst: RoutingInstance,
    cfg: TrainConfig,
    markov: WeekdayMarkovCache | None = None,
) -> np.ndarray:
    """Full transition matrix for ``inst``'s day.

    ``history`` must only contain records that may be used as features, i.e.
    those before ``inst.timestamp``; later records are ignored anyway. Sources
    without a model fall back to the weekday Markov row.
    """
    markov = _markov_source(history, markov)
    p_markov = markov.matrix(inst.timestamp, inst.weekday)
    out = np.array(p_markov, dtype=float)
    for s in inst.nodes:
        model = models.get(s)
        if model is None:
            if not np.isclose(out[s].sum(), 1.0):
                raise ValueError(f"no model and no Markov row for source {s}")
            continue
        fb = build_features(history, p_markov, inst, s, cfg)
        out[s] = forward(model, fb)
    return out


# ---------------------------------------------------------------- model store


def save_models(models: Mapping[int, ArcModelParams], cfg: TrainConfig, directory: str | Path) -> None:
    """One JSON document per source stop."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s, params in models.items():
        doc = params.to_dict()
        doc["config"] = cfg.to_dict()
        (directory / f"source_{s}.json").write_text(json.dumps(doc))


def load_models(directory: str | Path) -> tuple[dict[int, ArcModelParams], TrainConfig]:
    models, cfg = {}, None
    for path in sorted(Path(directory).glob("source_*.json")):
        doc = json.loads(path.read_text())
        params = ArcModelParams.from_dict(doc)
        models[params.source] = params
        cfg = TrainConfig.from_dict(doc["config"])
    if cfg is None:
        raise FileNotFoundError(f"no model files in {directory}")
    return models, cfg


__all__ = [
    "ABLATIONS", "Adam", "ArcModelParams", "DEFAULT_FEATURES", "FEATURE_GROUPS",
    "FeatureBundle", "TrainConfig", "backward", "build_features", "ce_loss",
    "ce_score_grad", "forward", "load_models", "predict_matrix",
    "save_models", "scores", "train_models", "train_source_model",
]
