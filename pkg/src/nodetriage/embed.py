"""k-means clustering and the classical-MDS "map plot" of the node feature space."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .fleet import FeatureMatrix

# Above this many nodes the map plot embeds via the centred data matrix instead
# of materialising the n x n distance matrix; both give the same coordinates.
EXACT_MDS_LIMIT = 3000

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")


@dataclass
class ClusterResult:
    labels: np.ndarray  # 1..k per row
    centroids: np.ndarray
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list)
    nodes: tuple[str, ...] | None = None

    @property
    def assignment(self) -> dict[str, int]:
        nodes = self.nodes or tuple(str(i) for i in range(len(self.labels)))
        return dict(zip(nodes, self.labels.tolist()))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    k = len(centroids)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(x)), labels].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-300:
            raise RuntimeError(f"k-means inertia increased: {history[-1]!r} -> {inertia!r}")
        history.append(inertia)
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                # Reseed an empty cluster at the point worst served by its centroid.
                cost = _sq_dists(x, new).min(axis=1)
                far = int(cost.argmax())
                new[j] = x[far]
                labels[far] = j
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(x)), labels].sum())
    if inertia > history[-1] * (1 + 1e-12) + 1e-300:
        raise RuntimeError(f"k-means inertia increased: {history[-1]!r} -> {inertia!r}")
    history.append(inertia)
    return labels, centroids, inertia, it, history


def _hartigan(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, inertia: float,
              history: list[float], max_moves: int = 10_000):
    """Single-point transfers while any of them lowers the inertia.

    Lloyd stops once every point sits with its nearest centroid; a transfer can
    still help because it also moves both centroids. Each step applies the
    best transfer, so inertia strictly decreases.
    """
    k = len(centroids)
    counts = np.bincount(labels, minlength=k).astype(float)
    if (counts == 0).any():
        return labels, centroids, inertia
    labels = labels.copy()
    rows = np.arange(len(x))
    for _ in range(max_moves):
        cents = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        d2 = _sq_dists(x, cents)
        own = counts[labels]
        removal = np.where(own > 1, own / np.maximum(own - 1, 1) * d2[rows, labels], 0.0)
        add = counts / (counts + 1) * d2
        add[rows, labels] = np.inf
        target = add.argmin(axis=1)
        gain = removal - add[rows, target]
        i = int(gain.argmax())
        if not gain[i] > 1e-12 * max(inertia, 1e-300):
            break
        counts[labels[i]] -= 1
        counts[target[i]] += 1
        labels[i] = target[i]
        cents = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        new = float(_sq_dists(x, cents)[rows, labels].sum())
        if new > inertia * (1 + 1e-12) + 1e-300:
            raise RuntimeError(f"k-means inertia increased: {inertia!r} -> {new!r}")
        inertia = new
        history.append(inertia)
    cents = np.array([x[labels == j].mean(axis=0) for j in range(k)])
    return labels, cents, inertia


def kmeans(data: FeatureMatrix | np.ndarray, k: int = 3, seed: int = 0, max_iter: int = 300,
           tol: float = 1e-9, n_init: int = 30) -> ClusterResult:
    """Seeded k-means++ starts, Lloyd iterations, then Hartigan single-point moves.

    The lowest-inertia run is kept.
    """
    nodes = data.nodes if isinstance(data, FeatureMatrix) else None
    x = np.asarray(data.values if isinstance(data, FeatureMatrix) else data, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a 2-D array")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must be between 1 and the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        labels, centroids, inertia, iters, history = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if k > 1:
            labels, centroids, inertia = _hartigan(x, labels, centroids, inertia, history)
        run = labels, centroids, inertia, iters, history
        if best is None or run[2] < best[2]:
            best = run
    labels, centroids, inertia, iters, history = best
    return ClusterResult(labels + 1, centroids, inertia, iters, history, nodes)


@dataclass
class Embedding2D:
    coords: np.ndarray
    eigenvalues: np.ndarray
    nodes: tuple[str, ...] | None = None

    @property
    def x(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.coords[:, 1]


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        big = np.abs(col) > 1e-10 * (np.abs(col).max() or 1.0)
        if big.any() and col[np.argmax(big)] < 0:
            vecs[:, j] = -col
    return vecs


def classical_mds(distances: np.ndarray, dim: int = 2) -> Embedding2D:
    """Torgerson scaling of a symmetric distance matrix."""
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    scale = np.abs(d).max() if d.size else 0.0
    if not np.allclose(d, d.T, rtol=0, atol=1e-12 * max(scale, 1.0)):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.abs(np.diag(d)) > 1e-12 * max(scale, 1.0)):
        raise ValueError("distance matrix must have a zero diagonal")
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    n = len(d)
    d2 = d * d
    b = -0.5 * (d2 - d2.mean(axis=0) - d2.mean(axis=1)[:, None] + d2.mean())
    b = (b + b.T) / 2
    w, v = np.linalg.eigh(b)
    order = np.argsort(w)[::-1][:dim]
    w, v = np.maximum(w[order], 0.0), _fix_signs(v[:, order].copy())
    coords = np.zeros((n, dim))
    coords[:, : len(w)] = v * np.sqrt(w)
    coords -= coords.mean(axis=0)
    return Embedding2D(coords, w)


def classical_mds_points(x: np.ndarray, dim: int = 2) -> Embedding2D:
    """Same embedding as ``classical_mds(euclidean(x))`` without the n x n matrix."""
    xc = np.asarray(x, dtype=float) - np.mean(x, axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    u, s = u[:, :dim], s[:dim]
    u = _fix_signs(u.copy())
    coords = np.zeros((len(xc), dim))
    coords[:, : len(s)] = u * s
    coords -= coords.mean(axis=0)
    return Embedding2D(coords, s * s)


@dataclass
class MapPlot:
    nodes: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    cluster: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("node_id,x,y,cluster\n")
        for n, a, b, c in zip(self.nodes, self.x.tolist(), self.y.tolist(), self.cluster.tolist()):
            buf.write(f"{n},{a!r},{b!r},{c}\n")
        return buf.getvalue()

    def to_svg(self, size: int = 600, title: str = "node map") -> str:
        pad = 30
        xs, ys = self.x, self.y
        span = max(float(np.ptp(xs)) if len(xs) else 0.0, float(np.ptp(ys)) if len(ys) else 0.0) or 1.0
        x0, y0 = (float(xs.min()) if len(xs) else 0.0), (float(ys.min()) if len(ys) else 0.0)
        inner = size - 2 * pad

        def px(v, lo):
            return pad + (v - lo) / span * inner

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
               f'viewBox="0 0 {size} {size}">',
               f'<rect width="{size}" height="{size}" fill="white"/>',
               f'<text x="{pad}" y="{pad - 10}" font-family="sans-serif" font-size="12">{title}</text>']
        for a, b, c in zip(xs.tolist(), ys.tolist(), self.cluster.tolist()):
            color = PALETTE[(int(c) - 1) % len(PALETTE)]
            out.append(f'<circle cx="{px(a, x0):.2f}" cy="{size - px(b, y0):.2f}" r="2" '
                       f'fill="{color}" fill-opacity="0.7"/>')
        for j, c in enumerate(sorted(set(self.cluster.tolist()))):
            color = PALETTE[(int(c) - 1) % len(PALETTE)]
            ty = pad + 14 * j
            out.append(f'<circle cx="{size - pad - 40}" cy="{ty}" r="4" fill="{color}"/>')
            out.append(f'<text x="{size - pad - 30}" y="{ty + 4}" font-family="sans-serif" '
                       f'font-size="11">{c}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant columns are dropped."""
    sd = x.std(axis=0)
    keep = sd > 0
    return (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]


def map_plot_data(matrix: FeatureMatrix, clusters: ClusterResult,
                  features: Sequence[str] | None = None,
                  exact_limit: int = EXACT_MDS_LIMIT) -> MapPlot:
    if len(clusters.labels) != len(matrix.nodes):
        raise ValueError("clusters were not computed on this matrix")
    x = matrix.values if features is None else matrix.select(features)
    z = standardize_columns(x)
    if z.shape[1] == 0:
        coords = np.zeros((len(z), 2))
    elif len(z) <= exact_limit:
        coords = classical_mds(squareform(pdist(z)), 2).coords
    else:
        coords = classical_mds_points(z, 2).coords
    # Identical nodes must land on identical points, not merely within rounding.
    _, first, inverse = np.unique(z, axis=0, return_index=True, return_inverse=True)
    coords = coords[first[inverse.ravel()]]
    return MapPlot(matrix.nodes, coords[:, 0], coords[:, 1], np.asarray(clusters.labels))
