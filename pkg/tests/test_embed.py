import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist, squareform

from conftest import make_matrix
from nodetriage.embed import (ClusterResult, classical_mds, classical_mds_points, kmeans,
                              map_plot_data)


def exhaustive_two_partition(x):
    best = np.inf
    n = len(x)
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)  # first point pinned to cluster 0 removes mirror duplicates
        if lab.all() or not lab.any():
            continue
        cost = sum(((x[lab == j] - x[lab == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, cost)
    return best


def test_kmeans_saturated():
    x = np.random.default_rng(0).normal(size=(6, 2))
    r = kmeans(x, k=6)
    assert r.inertia == 0.0
    assert sorted(r.labels.tolist()) == [1, 2, 3, 4, 5, 6]


def test_kmeans_two_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal([0, 0], 1, size=(300, 2))
    b = rng.normal([20, 20], 1, size=(300, 2))
    r = kmeans(np.vstack([a, b]), k=2, seed=3)
    cents = sorted(r.centroids.tolist())
    se = 1 / np.sqrt(300)
    assert np.allclose(cents[0], a.mean(axis=0), atol=3 * se)
    assert np.allclose(cents[1], b.mean(axis=0), atol=3 * se)
    assert np.allclose(cents[0], [0, 0], atol=3 * se) and np.allclose(cents[1], [20, 20], atol=3 * se)


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_eight_points_match_exhaustive(seed):
    x = np.random.default_rng(seed).normal(size=(8, 2))
    assert kmeans(x, k=2, seed=seed).inertia == pytest.approx(exhaustive_two_partition(x), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 60), st.integers(1, 6), st.integers(0, 2**32))
def test_kmeans_history_and_determinism(n, k, seed):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    r = kmeans(x, k=k, seed=seed, n_init=2)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(r.history, r.history[1:]))
    assert set(r.labels.tolist()) <= set(range(1, k + 1))
    again = kmeans(x, k=k, seed=seed, n_init=2)
    assert np.array_equal(r.labels, again.labels) and r.inertia == again.inertia


def test_kmeans_errors_and_assignment():
    m = make_matrix({"HPL Mean": [1.0, 2.0, 10.0]})
    r = kmeans(m, k=1)
    assert r.assignment == {"n0000": 1, "n0001": 1, "n0002": 1}
    with pytest.raises(ValueError):
        kmeans(m, k=4)
    with pytest.raises(ValueError):
        kmeans(np.zeros(3), k=1)


def pairwise(c):
    return pdist(c)


def test_mds_collinear():
    d = squareform(pdist(np.array([[0.0], [1.0], [2.0]])))
    e = classical_mds(d)
    np.testing.assert_allclose(sorted(pairwise(e.coords)), [1, 1, 2], atol=1e-12)


def test_mds_equilateral():
    d = np.ones((3, 3)) - np.eye(3)
    got = pairwise(classical_mds(d).coords)
    assert np.abs(got - 1).max() < 1e-9


def test_mds_input_validation():
    with pytest.raises(ValueError, match="symmetric"):
        classical_mds(np.array([[0, 1], [2, 0]], dtype=float))
    with pytest.raises(ValueError, match="diagonal"):
        classical_mds(np.array([[1, 1], [1, 0]], dtype=float))
    with pytest.raises(ValueError, match="non-negative"):
        classical_mds(np.array([[0, -1], [-1, 0]], dtype=float))
    with pytest.raises(ValueError, match="square"):
        classical_mds(np.zeros((2, 3)))


def procrustes_residual(a, b):
    a0, b0 = a - a.mean(axis=0), b - b.mean(axis=0)
    u, _, vt = np.linalg.svd(b0.T @ a0)
    return np.linalg.norm(b0 @ u @ vt - a0) / np.linalg.norm(a0)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**32))
def test_mds_reconstructs_2d_points(n, seed):
    p = np.random.default_rng(seed).uniform(-10, 10, size=(n, 2))
    e = classical_mds(squareform(pdist(p)))
    np.testing.assert_allclose(pairwise(e.coords), pdist(p), rtol=1e-6, atol=1e-9)
    assert np.abs(e.coords.mean(axis=0)).max() < 1e-9
    assert procrustes_residual(p, e.coords) < 1e-6


def test_points_route_matches_distance_route():
    z = np.random.default_rng(4).normal(size=(50, 6))
    a = classical_mds(squareform(pdist(z))).coords
    b = classical_mds_points(z).coords
    np.testing.assert_allclose(a, b, atol=1e-8)


def _clustered_matrix(seed=0):
    rng = np.random.default_rng(seed)
    tight1 = rng.normal([0, 0, 0], 0.3, size=(60, 3))
    tight2 = rng.normal([6, 0, 6], 0.3, size=(60, 3))
    wide = rng.normal([0, 8, 0], 2.0, size=(20, 3))
    x = np.vstack([tight1, tight2, wide])
    m = make_matrix({"HPL Mean": x[:, 0], "MPI_LUFAC Mean": x[:, 1], "OMP_MEM_OPT Mean": x[:, 2]})
    labels = np.repeat([1, 2, 3], [60, 60, 20])
    return m, ClusterResult(labels, np.zeros((3, 3)), 0.0, 0)


def test_map_plot_spread_of_high_variance_cluster():
    m, clusters = _clustered_matrix()
    plot = map_plot_data(m, clusters)
    xy = np.column_stack([plot.x, plot.y])
    spread = {c: np.sqrt(((xy[plot.cluster == c] - xy[plot.cluster == c].mean(axis=0)) ** 2)
                         .sum(axis=1).mean()) for c in (1, 2, 3)}
    assert spread[3] > 3 * max(spread[1], spread[2])


def test_map_plot_routes_agree():
    m, clusters = _clustered_matrix(1)
    a = map_plot_data(m, clusters)
    b = map_plot_data(m, clusters, exact_limit=10)
    np.testing.assert_allclose(a.x, b.x, atol=1e-8)
    np.testing.assert_allclose(a.y, b.y, atol=1e-8)


def test_map_plot_single_cluster_and_identical_nodes():
    m = make_matrix({"HPL Mean": [1.0, 1.0, 3.0, 7.0], "MPI_LUFAC Mean": [2.0, 2.0, 1.0, 0.0]})
    clusters = kmeans(m, k=1)
    plot = map_plot_data(m, clusters)
    assert set(plot.cluster.tolist()) == {1}
    assert plot.x[0] == plot.x[1] and plot.y[0] == plot.y[1]
    csv = plot.to_csv()
    assert csv.splitlines()[0] == "node_id,x,y,cluster"
    assert len(csv.splitlines()) == 5
    svg = plot.to_svg()
    assert svg.startswith("<svg") and svg.count("<circle") == 4 + 1
    with pytest.raises(ValueError):
        map_plot_data(m, kmeans(np.zeros((3, 1)) + np.arange(3)[:, None], k=1))
