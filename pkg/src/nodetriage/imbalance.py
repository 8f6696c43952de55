"""SMOTE oversampling and a small numpy MLP regressor for slow-node scoring.

The network regresses the HPL mean from proxy features; slow nodes are then
read off a quadrant rule (predicted and actual both low) instead of being
classified directly.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .outliers import Flag, OutlierReport

FORMAT = "nodetriage-mlp/1"


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    amount_percent: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")
        if self.amount_percent < 0 or self.amount_percent % 100:
            raise ValueError("amount_percent must be a non-negative multiple of 100")


@dataclass(frozen=True)
class SmoteDraw:
    points: np.ndarray
    parent: np.ndarray
    neighbor: np.ndarray
    weight: np.ndarray  # interpolation fraction u in [0, 1]


def nearest_neighbors(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other rows (Euclidean), ties broken by index."""
    d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def smote_with_parents(minority: np.ndarray | Sequence[Sequence[float]],
                       config: SmoteConfig = SmoteConfig()) -> SmoteDraw:
    x = np.asarray(minority, dtype=float)
    per_point = config.amount_percent // 100
    if x.ndim != 2:
        raise ValueError("minority must be a 2-D array")
    if per_point == 0:
        empty = np.empty(0, dtype=int)
        return SmoteDraw(np.empty((0, x.shape[1])), empty, empty, np.empty(0))
    if len(x) <= config.k_neighbors:
        raise ValueError(f"minority has {len(x)} points; need more than k_neighbors={config.k_neighbors}")
    nn = nearest_neighbors(x, config.k_neighbors)
    parents, nbrs, us = [], [], []
    for i in range(len(x)):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(i,)))
        for _ in range(per_point):
            parents.append(i)
            nbrs.append(int(nn[i, rng.integers(config.k_neighbors)]))
            us.append(rng.random())
    parent, neighbor, u = np.array(parents), np.array(nbrs), np.array(us)
    p, q = x[parent], x[neighbor]
    pts = p + u[:, None] * (q - p)
    pts = np.clip(pts, np.minimum(p, q), np.maximum(p, q))
    return SmoteDraw(pts, parent, neighbor, u)


def smote(minority, config: SmoteConfig = SmoteConfig()) -> np.ndarray:
    return smote_with_parents(minority, config).points


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    seed: int = 0
    features: tuple[str, ...] = ()
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("layer dimensions do not chain")
        if len(self.weights) != len(self.biases):
            raise ValueError("one bias vector per layer required")
        if any(w.shape[1] != len(b) for w, b in zip(self.weights, self.biases)):
            raise ValueError("bias length must match layer width")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have a single unit")
        if len(self.x_mean) != self.weights[0].shape[0] or len(self.x_scale) != len(self.x_mean):
            raise ValueError("standardisation vectors must match the input dimension")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.x_mean.copy(), self.x_scale.copy(), self.y_mean, self.y_scale,
                        self.seed, self.features, list(self.loss_history))

    def permuted(self, perm: Sequence[int]) -> "MlpModel":
        """Equivalent model whose input column j is this model's column perm[j]."""
        perm = list(perm)
        m = self.copy()
        m.weights[0] = self.weights[0][perm]
        m.x_mean, m.x_scale = self.x_mean[perm], self.x_scale[perm]
        if self.features:
            m.features = tuple(self.features[p] for p in perm)
        return m

    def to_json(self) -> str:
        doc = {
            "format": FORMAT,
            "sizes": self.sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "seed": self.seed,
            "features": list(self.features),
            "loss_history": self.loss_history,
        }
        return json.dumps(doc, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        doc = json.loads(text)
        if doc.get("format") != FORMAT:
            raise ValueError(f"unsupported model format {doc.get('format')!r}")
        m = cls([np.array(w, dtype=float).reshape(a, b) for w, a, b in
                 zip(doc["weights"], doc["sizes"], doc["sizes"][1:])],
                [np.array(b, dtype=float) for b in doc["biases"]],
                np.array(doc["x_mean"], dtype=float), np.array(doc["x_scale"], dtype=float),
                float(doc["y_mean"]), float(doc["y_scale"]), int(doc["seed"]),
                tuple(doc["features"]), [float(v) for v in doc["loss_history"]])
        return m


def init_mlp(input_dim: int, hidden: Sequence[int] = (300, 40), seed: int = 0) -> MlpModel:
    """He-initialised weights, zero biases, identity standardisation."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, 1]
    ws, bs = [], []
    for a, b in zip(sizes, sizes[1:]):
        ws.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        bs.append(np.zeros(b))
    return MlpModel(ws, bs, np.zeros(input_dim), np.ones(input_dim), seed=seed)


def _forward(model: MlpModel, xs: np.ndarray):
    acts = [xs]
    pre = []
    h = xs
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def _loss_and_grads(model: MlpModel, xs: np.ndarray, ys: np.ndarray):
    """Mean squared error in standardised units and its parameter gradients."""
    acts, pre = _forward(model, xs)
    out = acts[-1][:, 0]
    err = out - ys
    loss = float(np.mean(err * err))
    delta = (2.0 / len(ys)) * err[:, None]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    return loss, gw, gb


def _standardize(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != len(model.x_mean):
        raise ValueError(f"expected {len(model.x_mean)} features, got {x.shape[1]}")
    return (x - model.x_mean) / model.x_scale


def mlp_predict_many(model: MlpModel, x: np.ndarray) -> np.ndarray:
    acts, _ = _forward(model, _standardize(model, x))
    return acts[-1][:, 0] * model.y_scale + model.y_mean


def mlp_predict(model: MlpModel, x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    return float(mlp_predict_many(model, x[None, :])[0])


def mlp_loss(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    ys = (np.asarray(y, dtype=float) - model.y_mean) / model.y_scale
    return _loss_and_grads(model, _standardize(model, x), ys)[0]


def mlp_gradient_check(model: MlpModel, x: np.ndarray, y: np.ndarray, max_params: int = 200,
                       step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backprop and central differences on sampled parameters."""
    xs = _standardize(model, x)
    ys = (np.asarray(y, dtype=float) - model.y_mean) / model.y_scale
    if len(ys) == 0:
        raise ValueError("empty batch")
    _, gw, gb = _loss_and_grads(model, xs, ys)
    params = model.params()
    grads = [g for pair in zip(gw, gb) for g in pair]
    index = [(p, j) for p, arr in enumerate(params) for j in range(arr.size)]
    rng = np.random.default_rng(seed)
    if len(index) > max_params:
        index = [index[i] for i in np.sort(rng.choice(len(index), max_params, replace=False))]
    worst = 0.0
    for p, j in index:
        flat = params[p].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = _loss_and_grads(model, xs, ys)[0]
        flat[j] = orig - step
        down = _loss_and_grads(model, xs, ys)[0]
        flat[j] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[p].reshape(-1)[j]
        denom = max(abs(numeric), abs(analytic))
        err = abs(numeric - analytic) / denom if denom > 1e-10 else abs(numeric - analytic)
        worst = max(worst, err)
    return worst


def mlp_gradient_norm(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    ys = (np.asarray(y, dtype=float) - model.y_mean) / model.y_scale
    _, gw, gb = _loss_and_grads(model, _standardize(model, x), ys)
    return float(np.sqrt(sum((g * g).sum() for g in gw + gb)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = (300, 40)
    momentum: float = 0.9
    lr_growth: float = 1.05  # applied after every epoch that lowered the loss


@dataclass(frozen=True)
class BoostConfig:
    smote: SmoteConfig = SmoteConfig()
    minority_sigma: float = 3.0
    duplicate: int = 1  # extra real copies of each minority row


def boosted_training_set(x: np.ndarray, y: np.ndarray, boost: BoostConfig):
    """Original rows plus duplicated and SMOTE-interpolated minority rows.

    Minority rows have ``y`` more than ``minority_sigma`` stddevs below the mean.
    Returns ``(x, y, minority_mask)``.
    """
    mu, sd = float(y.mean()), float(y.std())
    minority = y < mu - boost.minority_sigma * sd
    m = int(minority.sum())
    if m <= boost.smote.k_neighbors:
        warnings.warn(f"only {m} minority rows (need > {boost.smote.k_neighbors}); "
                      "training without boosting", stacklevel=3)
        return x, y, minority
    xm, ym = x[minority], y[minority]
    draw = smote_with_parents(xm, boost.smote)
    ys = ym[draw.parent] + draw.weight * (ym[draw.neighbor] - ym[draw.parent])
    xs = [x] + [xm] * boost.duplicate + [draw.points]
    yy = [y] + [ym] * boost.duplicate + [ys]
    return np.vstack(xs), np.concatenate(yy), minority


def mlp_train(x: np.ndarray, y: np.ndarray, boost: BoostConfig | None = BoostConfig(),
              hyper: TrainConfig = TrainConfig(), features: Sequence[str] = ()) -> MlpModel:
    """Mini-batch SGD with momentum on mean squared error.

    After every epoch the full training loss is evaluated; an epoch that raises
    it is rolled back and the learning rate halved, so ``loss_history`` never
    increases. Epochs that lower it grow the rate by ``lr_growth``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be 2-D with one row per target")
    if not np.std(y) > 0:
        raise ValueError("target is constant")
    x_mean, x_scale = x.mean(axis=0), x.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    y_mean, y_scale = float(y.mean()), float(y.std())
    if boost is not None:
        x, y, _ = boosted_training_set(x, y, boost)

    model = init_mlp(x.shape[1], hyper.hidden, hyper.seed)
    model.x_mean, model.x_scale, model.y_mean, model.y_scale = x_mean, x_scale, y_mean, y_scale
    model.features = tuple(features)
    xs = (x - x_mean) / x_scale
    ys = (y - y_mean) / y_scale
    rng = np.random.default_rng(np.random.SeedSequence(hyper.seed, spawn_key=(1,)))
    lr = hyper.learning_rate
    best = _loss_and_grads(model, xs, ys)[0]
    history = [best]
    velocity = [np.zeros_like(p) for p in model.params()]
    for _ in range(hyper.epochs):
        snapshot = [p.copy() for p in model.params()]
        order = rng.permutation(len(xs))
        with np.errstate(over="ignore", invalid="ignore"):
            for lo in range(0, len(order), hyper.batch_size):
                idx = order[lo:lo + hyper.batch_size]
                _, gw, gb = _loss_and_grads(model, xs[idx], ys[idx])
                grads = [g for pair in zip(gw, gb) for g in pair]
                for p, v, g in zip(model.params(), velocity, grads):
                    v *= hyper.momentum
                    v -= lr * g
                    p += v
            loss = _loss_and_grads(model, xs, ys)[0]
        if not np.isfinite(loss) or loss > best:
            for p, s in zip(model.params(), snapshot):
                p[...] = s
            for v in velocity:
                v[...] = 0
            lr /= 2
            history.append(best)
            continue
        best = loss
        lr *= hyper.lr_growth
        history.append(loss)
    model.loss_history = history
    return model


@dataclass(frozen=True)
class QuadrantRule:
    x_cut: float
    y_cut: float

    @classmethod
    def from_sigma(cls, predicted: np.ndarray, actual: np.ndarray, k: float = 3.0) -> "QuadrantRule":
        return cls(float(predicted.mean() - k * predicted.std()),
                   float(actual.mean() - k * actual.std()))


def quadrant_outliers(predicted: Mapping[str, float], actual: Mapping[str, float],
                      rule: QuadrantRule | None = None) -> OutlierReport:
    """Flag nodes in the lower-left quadrant (predicted < x_cut and actual < y_cut)."""
    if set(predicted) != set(actual):
        raise ValueError("predicted and actual must cover the same nodes")
    nodes = sorted(predicted)
    p = np.array([predicted[n] for n in nodes], dtype=float)
    a = np.array([actual[n] for n in nodes], dtype=float)
    if rule is None:
        rule = QuadrantRule.from_sigma(p, a)
    hit = (p < rule.x_cut) & (a < rule.y_cut)
    flagged = [Flag(n, float(v), "below") for n, v, h in zip(nodes, p, hit) if h]
    return OutlierReport("nn", ("predicted", "actual"), rule.x_cut, flagged,
                         metadata={"x_cut": rule.x_cut, "y_cut": rule.y_cut})
