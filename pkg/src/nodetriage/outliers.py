"""Slow-node detectors: composite screen, sigma cut, Mahalanobis search, regression."""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fleet import Feature, FeatureMatrix

EIGEN_FLOOR = 1e-10

DEFAULT_COMPOSITE: tuple[tuple[str, float], ...] = (
    ("MPI DGEMM Min", 4.0),
    ("MPI DGEMM Mean", 2.0),
    ("MPI NBODY Mean", 1.0),
)
DEFAULT_CUTOFF = 7190.0
FAST_LANDMARK = 7600.0

# Beyond this many subsets enumeration must be requested explicitly.
SUBSET_GATE = 1_000_000


@dataclass(frozen=True)
class Flag:
    node_id: str
    score: float
    direction: str  # "below" | "above"


@dataclass
class OutlierReport:
    """Flagged nodes for one detector run.

    ``flagged`` is the actionable list; ``informational`` holds nodes that are
    unusual on the fast side and never count as slow.
    """

    method: str
    subset: tuple[str, ...]
    threshold: float
    flagged: list[Flag] = field(default_factory=list)
    informational: list[Flag] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.flagged = sorted(self.flagged, key=lambda f: f.node_id)
        self.informational = sorted(self.informational, key=lambda f: f.node_id)
        ids = [f.node_id for f in self.flagged]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node in report")
        if not all(math.isfinite(f.score) for f in self.flagged + self.informational):
            raise ValueError("non-finite score in report")

    @property
    def nodes(self) -> set[str]:
        return {f.node_id for f in self.flagged}

    def to_dict(self) -> dict:
        def enc(flags):
            return [{"node_id": f.node_id, "score": f.score, "direction": f.direction} for f in flags]
        return {
            "method": self.method,
            "subset": list(self.subset),
            "threshold": self.threshold,
            "flagged": enc(self.flagged),
            "informational": enc(self.informational),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "OutlierReport":
        def dec(items):
            return [Flag(i["node_id"], float(i["score"]), i["direction"]) for i in items]
        return cls(d["method"], tuple(d.get("subset", ())), float(d["threshold"]),
                   dec(d.get("flagged", [])), dec(d.get("informational", [])),
                   dict(d.get("metadata", {})))


def reports_to_json(reports: Sequence[OutlierReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2) + "\n"


def reports_from_json(text: str) -> list[OutlierReport]:
    """Accepts a single report object, a list of them, or an empty file."""
    if not text.strip():
        return []
    doc = json.loads(text)
    if isinstance(doc, dict):
        doc = [doc]
    return [OutlierReport.from_dict(d) for d in doc]


def _direction(value: float, mean: float) -> str:
    return "below" if value < mean else "above"


def composite_screen(matrix: FeatureMatrix,
                     weights: Sequence[tuple[str | Feature, float]] = DEFAULT_COMPOSITE,
                     cutoff: float = DEFAULT_CUTOFF,
                     fast_cutoff: float | None = None) -> OutlierReport:
    """Flag nodes whose weighted feature sum is strictly below ``cutoff``."""
    feats = [matrix.resolve(f) for f, _ in weights]
    coef = np.array([c for _, c in weights], dtype=float)
    value = matrix.select(feats) @ coef
    mean = float(value.mean())
    flagged = [Flag(n, float(v), _direction(v, mean))
               for n, v in zip(matrix.nodes, value) if v < cutoff]
    info = []
    if fast_cutoff is not None:
        info = [Flag(n, float(v), "above") for n, v in zip(matrix.nodes, value) if v > fast_cutoff]
    subset = tuple(f"{c:g}*{f.label}" for f, c in zip(feats, coef))
    return OutlierReport("composite", subset, cutoff, flagged, info,
                         {"fast_cutoff": fast_cutoff, "fleet_mean": mean})


def sigma_outliers(matrix: FeatureMatrix, feature: str | Feature, k: float = 3.5,
                   side: str = "below") -> OutlierReport:
    if side not in ("below", "above", "both"):
        raise ValueError(f"side must be below, above or both, not {side!r}")
    if k < 0:
        raise ValueError("k must be non-negative")
    feat = matrix.resolve(feature)
    col = matrix.column(feat)
    mean, std = float(col.mean()), float(col.std())
    if not std > 0:
        raise ValueError(f"feature {feat.label!r} is constant")
    z = (col - mean) / std
    flagged = []
    for node, s in zip(matrix.nodes, z):
        if side in ("below", "both") and s < -k:
            flagged.append(Flag(node, float(s), "below"))
        elif side in ("above", "both") and s > k:
            flagged.append(Flag(node, float(s), "above"))
    return OutlierReport("sigma", (feat.label,), k, flagged,
                         metadata={"side": side, "mean": mean, "stddev": std})


@dataclass(frozen=True)
class CovarianceModel:
    features: tuple[str, ...]
    mean: np.ndarray
    cov: np.ndarray
    pinv: np.ndarray
    rank: int
    eigenvalues: np.ndarray

    @property
    def rank_deficient(self) -> bool:
        return self.rank < len(self.features)


def covariance_from_array(x: np.ndarray, features: Sequence[str] | None = None) -> CovarianceModel:
    """Population covariance and its eigenvalue-floored pseudo-inverse."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise ValueError("need at least 2 observations of at least 1 feature")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    cov = (cov + cov.T) / 2
    w, v = np.linalg.eigh(cov)
    lam_max = max(w.max(), 0.0)
    keep = w > EIGEN_FLOOR * lam_max if lam_max > 0 else np.zeros_like(w, dtype=bool)
    inv_w = np.zeros_like(w)
    inv_w[keep] = 1.0 / w[keep]
    pinv = (v * inv_w) @ v.T
    pinv = (pinv + pinv.T) / 2
    names = tuple(features) if features is not None else tuple(f"f{i}" for i in range(x.shape[1]))
    return CovarianceModel(names, mean, cov, pinv, int(keep.sum()), w)


def fit_covariance(matrix: FeatureMatrix, features: Sequence[str | Feature]) -> CovarianceModel:
    feats = [matrix.resolve(f) for f in features]
    if len(matrix.nodes) < 2:
        raise ValueError("need at least 2 nodes")
    return covariance_from_array(matrix.select(feats), [f.label for f in feats])


def mahalanobis_distances(x: np.ndarray, model: CovarianceModel) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != len(model.mean):
        raise ValueError(f"expected {len(model.mean)} features, got {x.shape[1]}")
    d = x - model.mean
    q = np.einsum("ij,jk,ik->i", d, model.pinv, d)
    return np.sqrt(np.maximum(q, 0.0))


def mahalanobis_distance(x: Sequence[float], model: CovarianceModel) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    return float(mahalanobis_distances(x[None, :], model)[0])


def mahalanobis_outliers(matrix: FeatureMatrix, features: Sequence[str | Feature],
                         score_cut: float = 3.5,
                         primary_feature: str | Feature = "HPL Mean") -> OutlierReport:
    """Flag nodes whose distance z-score exceeds ``score_cut``.

    Nodes below the fleet mean of ``primary_feature`` are flagged; the rest go
    to the informational (fast) list.
    """
    feats = [matrix.resolve(f) for f in features]
    primary = matrix.column(primary_feature)
    return _subset_report(matrix, tuple(matrix.index(f) for f in feats), score_cut,
                          primary, float(primary.mean()))


def _subset_report(matrix: FeatureMatrix, cols: tuple[int, ...], score_cut: float,
                   primary: np.ndarray, primary_mean: float) -> OutlierReport:
    labels = tuple(matrix.features[c].label for c in cols)
    model = covariance_from_array(matrix.values[:, cols], labels)
    dist = mahalanobis_distances(matrix.values[:, cols], model)
    mu, sd = float(dist.mean()), float(dist.std())
    flagged, info = [], []
    if sd > 0:
        z = (dist - mu) / sd
        for i in np.flatnonzero(z > score_cut):
            f = Flag(matrix.nodes[i], float(dist[i]), _direction(primary[i], primary_mean))
            (flagged if f.direction == "below" else info).append(f)
    meta = {"rank": model.rank, "rank_deficient": model.rank_deficient,
            "distance_mean": mu, "distance_std": sd}
    return OutlierReport("mahalanobis", labels, score_cut, flagged, info, meta)


def subset_outliers(matrix: FeatureMatrix, max_arity: int = 2, score_cut: float = 3.5,
                    primary_feature: str | Feature = "HPL Mean",
                    features: Sequence[str | Feature] | None = None,
                    min_arity: int = 2, threads: int = 1,
                    allow_large: bool = False) -> dict[tuple[str, ...], OutlierReport]:
    """Mahalanobis outliers for every feature subset of size min_arity..max_arity.

    Subsets are enumerated lexicographically over the matrix column order (or
    over ``features`` when a whitelist is given).
    """
    cols = sorted(matrix.index(f) for f in features) if features is not None \
        else list(range(len(matrix.features)))
    if not 2 <= min_arity <= max_arity <= 6:
        raise ValueError("arity must satisfy 2 <= min_arity <= max_arity <= 6")
    if max_arity > len(cols):
        raise ValueError(f"max_arity {max_arity} exceeds {len(cols)} features")
    total = sum(math.comb(len(cols), r) for r in range(min_arity, max_arity + 1))
    if total > SUBSET_GATE and not allow_large:
        raise ValueError(f"{total} subsets requested; pass allow_large=True or a feature whitelist")
    primary = matrix.column(primary_feature)
    pmean = float(primary.mean())
    subsets = [c for r in range(min_arity, max_arity + 1) for c in itertools.combinations(cols, r)]

    def run(c):
        return _subset_report(matrix, c, score_cut, primary, pmean)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(run, subsets, chunksize=64))
    else:
        reports = [run(c) for c in subsets]
    return {r.subset: r for r in reports}


@dataclass(frozen=True)
class RegressionFit:
    target: str
    features: tuple[str, ...]
    coefficients: np.ndarray
    intercept: float
    residual_std: float
    stderr: np.ndarray
    eliminated: tuple[str, ...] = ()

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.coefficients + self.intercept


def _ols(x: np.ndarray, y: np.ndarray):
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    gram_inv = np.linalg.pinv(xc.T @ xc, hermitian=True)
    beta = gram_inv @ (xc.T @ yc)
    resid = yc - xc @ beta
    dof = max(len(y) - x.shape[1] - 1, 1)
    s = math.sqrt(float(resid @ resid) / dof)
    se = np.sqrt(np.maximum(np.diag(gram_inv), 0.0)) * s
    return beta, float(ym - xm @ beta), s, se


def fit_regression(matrix: FeatureMatrix, target: str | Feature,
                   candidates: Sequence[str | Feature],
                   max_inflation: float = 0.05) -> RegressionFit:
    """OLS of ``target`` on ``candidates`` followed by greedy backward elimination.

    A feature is dropped when doing so raises the residual standard deviation
    by at most ``max_inflation`` (relative).
    """
    if not candidates:
        raise ValueError("no candidate features")
    tgt = matrix.resolve(target)
    feats = [matrix.resolve(f) for f in candidates]
    if tgt in feats:
        raise ValueError("target must not be among the candidates")
    if len(matrix.nodes) < len(feats) + 2:
        raise ValueError(f"need at least {len(feats) + 2} nodes")
    y = matrix.column(tgt)
    x_all = matrix.select(feats)
    active = list(range(len(feats)))
    _, _, s_cur, _ = _ols(x_all, y)
    slack = 1e-12 * (float(np.std(y)) or 1.0)
    dropped = []
    while len(active) > 1:
        trials = []
        for j in active:
            rest = [a for a in active if a != j]
            trials.append((_ols(x_all[:, rest], y)[2], j))
        s_new, j = min(trials, key=lambda t: t[0])
        if s_new > s_cur * (1 + max_inflation) + slack:
            break
        active.remove(j)
        dropped.append(feats[j].label)
        s_cur = s_new
    beta, b0, s, se = _ols(x_all[:, active], y)
    return RegressionFit(tgt.label, tuple(feats[a].label for a in active), beta, b0, s, se,
                         tuple(dropped))
