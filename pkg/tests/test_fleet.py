import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodetriage.fleet import (APPS, STATS, Feature, FeatureMatrix, IngestError, SampleSet, aggregate,
                              boxplot_groups, ingest_samples, parse_feature, sigma_score,
                              variance_growth)

HEADER = "node_id,app_id,sample_index,value\n"


def csv(*rows):
    return HEADER + "".join(",".join(map(str, r)) + "\n" for r in rows)


def test_ingest_well_formed():
    s = ingest_samples(csv(("n1", "HPL", 0, 2.0), ("n1", "HPL", 1, 4.0),
                           ("n2", "HPL", 0, 3.0), ("n2", "HPL", 1, 5.0)))
    assert len(s) == 4
    assert s.nodes == ["n1", "n2"]
    assert s.apps == ["HPL"]


def test_ingest_duplicate_triple():
    with pytest.raises(IngestError, match=r"line 4: duplicate sample \('n1', 'HPL', 0\)"):
        ingest_samples(csv(("n1", "HPL", 0, 2.0), ("n1", "HPL", 1, 4.0), ("n1", "HPL", 0, 3.0)))


def test_ingest_non_positive_value():
    with pytest.raises(IngestError, match=r"line 3: non-positive value '-3.0'"):
        ingest_samples(csv(("n1", "HPL", 0, 2.0), ("n1", "HPL", 1, "-3.0")))


@pytest.mark.parametrize("text, pattern", [
    (HEADER + "n1,HPL,0,2.0,9\n", "malformed row"),
    (HEADER + "n1,HPL,0\n", "line 2: malformed row"),
    (HEADER + "n1,HPL,0,abc\n", "line 2: non-numeric value"),
    (HEADER + "n1,HPL,0,inf\n", "line 2: non-finite value"),
    (HEADER + "n1,HPL,x,2\n", "line 2: sample_index"),
    (HEADER + "n1,HPL,-1,2\n", "line 2: sample_index"),
    (HEADER + "n1,FOO,0,2\n", "line 2: unknown app_id 'FOO'"),
    ("node,app,idx,value\nn1,HPL,0,2\n", "line 1: header"),
    ("", "missing header"),
])
def test_ingest_errors(text, pattern):
    with pytest.raises(IngestError, match=pattern):
        ingest_samples(text)


def test_ingest_rectangular_completeness():
    text = csv(("n1", "HPL", 0, 2.0), ("n1", "MPI_LUFAC", 0, 4.0), ("n2", "HPL", 0, 3.0))
    with pytest.raises(IngestError, match="line 4: node 'n2' lacks samples"):
        ingest_samples(text)
    with pytest.warns(UserWarning, match="dropping 1 incomplete"):
        s = ingest_samples(text, allow_missing=True)
    assert s.nodes == ["n1"]


def test_ingest_unknown_app_passthrough():
    s = ingest_samples(csv(("n1", "CUSTOM", 0, 2.0), ("n1", "HPL", 0, 3.0)), allow_unknown_apps=True)
    assert s.apps == ["HPL", "CUSTOM"]
    m = aggregate(s)
    assert m.labels[:4] == ["HPL Min", "HPL Mean", "HPL StdDev", "HPL Max"]
    assert m.labels[4] == "CUSTOM Min"


def test_aggregate_two_point_statistics():
    m = aggregate(ingest_samples(csv(("n1", "HPL", 0, 2), ("n1", "HPL", 1, 4))))
    assert m.values[0].tolist() == [2.0, 3.0, 1.0, 4.0]


def test_aggregate_single_sample():
    m = aggregate(ingest_samples(csv(("n1", "HPL", 0, 7.25))))
    assert m.values[0].tolist() == [7.25, 7.25, 0.0, 7.25]


def test_feature_order_follows_catalog():
    rows = [(n, a, 0, 1.0 + i) for n in ("b", "a") for i, a in enumerate(reversed(APPS))]
    m = aggregate(ingest_samples(csv(*rows)))
    assert m.features == tuple(Feature(a, s) for a in APPS for s in STATS)
    assert m.nodes == ("a", "b")


sample_values = st.lists(st.floats(0.1, 1e4, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(sample_values, sample_values), min_size=1, max_size=5), st.randoms())
def test_aggregate_invariants_and_permutation(nodes, rnd):
    rows = []
    for i, (a, b) in enumerate(nodes):
        rows += [(f"n{i}", "HPL", j, v) for j, v in enumerate(a)]
        rows += [(f"n{i}", "MPI_LUFAC", j, v) for j, v in enumerate(b)]
    m = aggregate(ingest_samples(csv(*rows)))
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    m2 = aggregate(ingest_samples(csv(*shuffled)))
    assert m2.nodes == m.nodes and np.array_equal(m2.values, m.values)

    for i, (a, b) in enumerate(nodes):
        for k, vals in enumerate((b, a)):  # MPI_LUFAC precedes HPL in the catalog
            mn, mean, sd, mx = m.values[i, 4 * k: 4 * k + 4]
            assert mn <= mean <= mx
            assert sd >= 0
            x = np.array(vals)
            ref = np.mean((x - x.mean()) ** 2)
            assert sd * sd == pytest.approx(ref, rel=1e-12, abs=1e-12 * max(x.max() ** 2, 1))


def test_parse_feature_aliases():
    assert parse_feature("MPI DGEMM Mean") == Feature("MPI_DGEMM_A", "Mean")
    assert parse_feature("MPI_DGEMM_A Mean") == Feature("MPI_DGEMM_A", "Mean")
    assert parse_feature("MPI_DGEMM_A.mean") == Feature("MPI_DGEMM_A", "Mean")
    assert parse_feature("MPI DGEMMd Min") == Feature("MPI_DGEMM_B", "Min")
    assert parse_feature("mpi lufac stddev") == Feature("MPI_LUFAC", "StdDev")
    assert parse_feature("Deflated HPL Mean") == Feature("DEFLATED_HPL", "Mean")
    with pytest.raises(KeyError):
        parse_feature("HPL Median")
    with pytest.raises(KeyError):
        parse_feature("NOPE Mean")


def test_feature_matrix_csv_round_trip():
    from conftest import small_fleet
    _, m, _ = small_fleet()
    back = FeatureMatrix.from_csv(m.to_csv())
    assert back.nodes == m.nodes and back.features == m.features
    assert np.array_equal(back.values, m.values)


def _fleet_of(n, seed=0):
    rnd = random.Random(seed)
    rows = [(f"n{i:03d}", "HPL", j, rnd.uniform(700, 900)) for i in range(n) for j in range(5)]
    s = ingest_samples(csv(*rows))
    return s, aggregate(s)


def test_boxplot_groups_cover_92_nodes():
    s, m = _fleet_of(92)
    g = boxplot_groups(m, s, "HPL Mean", 70, 11, 11)
    ids = [b.node_id for grp in (g.bottom, g.middle, g.top) for b in grp]
    assert len(ids) == 92 and set(ids) == set(m.nodes)
    assert max(b.rank_value for b in g.bottom) <= min(b.rank_value for b in g.middle)
    assert max(b.rank_value for b in g.middle) <= min(b.rank_value for b in g.top)


def test_boxplot_groups_three_nodes():
    s = ingest_samples(csv(("c", "HPL", 0, 1.0), ("a", "HPL", 0, 3.0), ("b", "HPL", 0, 2.0)))
    g = boxplot_groups(aggregate(s), s, "HPL Mean", 1, 1, 1)
    assert [x.node_id for x in g.bottom + g.middle + g.top] == ["c", "b", "a"]


def test_boxplot_groups_errors():
    s, m = _fleet_of(50)
    with pytest.raises(ValueError, match="exceed fleet size"):
        boxplot_groups(m, s, "HPL Mean", 100, 1, 1)
    with pytest.raises(KeyError):
        boxplot_groups(m, s, "MPI DGEMM Mean", 1, 1, 1)


def test_boxplot_middle_straddles_median_on_large_fleet():
    s, m = _fleet_of(301)
    g = boxplot_groups(m, s, "HPL Mean", 10, 11, 10)
    col = np.sort(m.column("HPL Mean"))
    start = math.ceil((301 - 11) / 2)
    assert [b.rank_value for b in g.middle] == col[start:start + 11].tolist()
    box = g.bottom[0]
    raw = s.values_for(box.node_id, "HPL")
    assert box.minimum == raw.min() and box.maximum == raw.max()
    assert box.variance == pytest.approx(np.var(raw))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.data())
def test_boxplot_partition_property(n, data):
    s, m = _fleet_of(n, seed=n)
    b = data.draw(st.integers(1, n - 2))
    mid = data.draw(st.integers(1, n - b - 1))
    t = data.draw(st.integers(1, n - b - mid))
    g = boxplot_groups(m, s, "HPL Mean", b, mid, t)
    ids = [x.node_id for x in g.bottom + g.middle + g.top]
    assert len(ids) == len(set(ids)) == b + mid + t
    assert max(x.rank_value for x in g.bottom) <= min(x.rank_value for x in g.top)


def test_variance_growth_examples():
    s = ingest_samples(csv(*[("n1", "HPL", i, v) for i, v in enumerate([1, 1, 1, 9])]))
    # population variance by hand: {1,1} -> 0; {1,1,1,9}: mean 3, deviations 4,4,4,36 -> 12
    assert variance_growth(s, "n1", "HPL", [2, 4]) == [(2, 0.0), (4, 12.0)]
    with pytest.raises(ValueError, match="exceeds 4 available"):
        variance_growth(s, "n1", "HPL", [5])


def test_variance_growth_uses_sample_index_order():
    s = ingest_samples(csv(("n1", "HPL", 3, 9), ("n1", "HPL", 0, 1), ("n1", "HPL", 2, 1), ("n1", "HPL", 1, 1)))
    assert variance_growth(s, "n1", "HPL", [3]) == [(3, 0.0)]


def test_variance_growth_constant_and_batches():
    s = ingest_samples(csv(*[("n1", "HPL", i, 5.0) for i in range(50)]))
    out = variance_growth(s, "n1", "HPL", [10, 20, 30, 40, 50])
    assert len(out) == 5 and all(v == 0.0 for _, v in out)


def test_sigma_score():
    assert sigma_score(7, 10, 1) == -3
    assert sigma_score(10, 10, 5) == 0
    # (803 - 830) / 7.7 = -27 / 7.7
    assert sigma_score(803, 830, 7.7) == pytest.approx(-3.5064935064935066, rel=1e-12)
    with pytest.raises(ValueError):
        sigma_score(1, 1, 0)


def test_sample_set_from_records_validates():
    with pytest.raises(IngestError, match="non-positive"):
        SampleSet.from_records([("n1", "HPL", 0, 0.0)])
