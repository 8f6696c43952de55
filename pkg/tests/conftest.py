import functools

import numpy as np
import pytest

from nodetriage.fleet import Feature, FeatureMatrix, aggregate, boxplot_groups
from nodetriage.sim import FleetConfig, simulate_fleet

# Filled by test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@functools.lru_cache(maxsize=None)
def full_fleet(seed: int):
    """Full-size default fleet: (matrix, truth, HPL Mean boxplot groups).

    Raw samples are dropped after aggregation; five cached fleets would
    otherwise hold several GB.
    """
    samples, truth = simulate_fleet(FleetConfig(seed=seed))
    matrix = aggregate(samples)
    return matrix, tuple(truth), boxplot_groups(matrix, samples, "HPL Mean")


@functools.lru_cache(maxsize=None)
def small_fleet(seed: int = 5, nodes: int = 400, outliers: int = 12, samples: int = 30):
    s, truth = simulate_fleet(FleetConfig(node_count=nodes, outlier_count=outliers,
                                          samples_per_node=samples, seed=seed))
    return s, aggregate(s), tuple(truth)


def make_matrix(columns: dict[str, list[float]], nodes=None) -> FeatureMatrix:
    """FeatureMatrix from ``{"APP_ID Stat": values}`` columns."""
    feats = []
    for label in columns:
        app, _, stat = label.rpartition(" ")
        feats.append(Feature(app, stat))
    values = np.column_stack([np.asarray(v, dtype=float) for v in columns.values()])
    nodes = nodes or [f"n{i:04d}" for i in range(len(values))]
    return FeatureMatrix(tuple(nodes), tuple(feats), values)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
