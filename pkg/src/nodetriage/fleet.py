"""Benchmark samples, the application catalog and per-node feature statistics.

Raw samples arrive as ``node_id,app_id,sample_index,value`` rows. They are
validated into a :class:`SampleSet` and reduced by :func:`aggregate` to a dense
node x feature :class:`FeatureMatrix`, where every feature is one
(application, statistic) pair such as ``"MPI DGEMM Min"``.
"""
from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np
import pandas as pd

APPS: tuple[str, ...] = (
    "OMP_DGEMM_FMA",
    "OMP_DGEMM_LIB",
    "OMP_NBODY_FMA",
    "OMP_MEM_UNOPT",
    "OMP_MEM_OPT",
    "MPI_DGEMM_A",
    "MPI_DGEMM_B",
    "MPI_NBODY_FMA",
    "MPI_LUFAC",
    "MPI_DGEMM_UNOPT",
    "DEFLATED_HPL",
    "HPL",
)

# Human-readable names used in feature labels ("MPI DGEMM Mean").
APP_LABELS: dict[str, str] = {
    "OMP_DGEMM_FMA": "OMP DGEMM FMA",
    "OMP_DGEMM_LIB": "OMP DGEMM",
    "OMP_NBODY_FMA": "OMP NBODY",
    "OMP_MEM_UNOPT": "OMP MEM",
    "OMP_MEM_OPT": "OMP MEM Opt",
    "MPI_DGEMM_A": "MPI DGEMM",
    "MPI_DGEMM_B": "MPI DGEMMd",
    "MPI_NBODY_FMA": "MPI NBODY",
    "MPI_LUFAC": "MPI LUFac",
    "MPI_DGEMM_UNOPT": "MPI DGEMM Unopt",
    "DEFLATED_HPL": "Deflated HPL",
    "HPL": "HPL",
}

MEMORY_APPS = frozenset({"OMP_MEM_UNOPT", "OMP_MEM_OPT"})

STATS: tuple[str, ...] = ("Min", "Mean", "StdDev", "Max")

CSV_HEADER = ("node_id", "app_id", "sample_index", "value")


class IngestError(ValueError):
    """Raised when sample input violates the CSV schema or SampleSet invariants."""


def app_units(app_id: str) -> str:
    return "GB/s" if app_id in MEMORY_APPS else "GFlops/s"


class Feature(NamedTuple):
    app: str
    stat: str

    @property
    def label(self) -> str:
        return f"{APP_LABELS.get(self.app, self.app)} {self.stat}"

    def __str__(self) -> str:
        return self.label


def _app_rank(app_id: str) -> tuple[int, str]:
    try:
        return (APPS.index(app_id), "")
    except ValueError:
        return (len(APPS), app_id)


def parse_feature(text: str, apps: Iterable[str] = APPS) -> Feature:
    """Resolve ``"MPI DGEMM Mean"``, ``"MPI_DGEMM_A Mean"`` or ``"MPI_DGEMM_A.Mean"``."""
    raw = text.strip()
    if "." in raw and " " not in raw:
        head, _, tail = raw.rpartition(".")
    else:
        head, _, tail = raw.rpartition(" ")
    stat = next((s for s in STATS if s.lower() == tail.strip().lower()), None)
    head = head.strip()
    if stat is None or not head:
        raise KeyError(f"unknown feature {text!r}")
    for app in apps:
        if head == app or head == APP_LABELS.get(app):
            return Feature(app, stat)
    folded = head.casefold()
    for app in apps:
        if folded in (app.casefold(), APP_LABELS.get(app, app).casefold()):
            return Feature(app, stat)
    raise KeyError(f"unknown feature {text!r}")


@dataclass(frozen=True)
class SampleSet:
    """Validated per-node, per-application benchmark samples.

    ``frame`` is kept in canonical order (node_id, catalog app order,
    sample_index) so everything derived from it is independent of input row
    order.
    """

    frame: pd.DataFrame = field(repr=False)

    @property
    def nodes(self) -> list[str]:
        return list(pd.unique(self.frame["node_id"]))

    @property
    def apps(self) -> list[str]:
        return sorted(pd.unique(self.frame["app_id"]), key=_app_rank)

    def __len__(self) -> int:
        return len(self.frame)

    def values_for(self, node: str, app: str) -> np.ndarray:
        """Samples of one node/app in sample_index order."""
        f = self.frame
        sel = f[(f["node_id"] == node) & (f["app_id"] == app)]
        return sel["value"].to_numpy(dtype=float)

    def to_csv(self, buf: TextIO | None = None) -> str | None:
        return self.frame.to_csv(buf, index=False, lineterminator="\n")

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, int, float]],
                     allow_unknown_apps: bool = False) -> "SampleSet":
        frame = pd.DataFrame(list(records), columns=list(CSV_HEADER))
        lines = np.arange(len(frame)) + 1
        return cls(_validate(frame, lines, allow_unknown_apps, allow_missing=False))

    @classmethod
    def from_canonical(cls, frame: pd.DataFrame) -> "SampleSet":
        """Wrap a frame already in canonical order (trusted producers only)."""
        return cls(frame.reset_index(drop=True))


def _canonical_sort(frame: pd.DataFrame) -> pd.DataFrame:
    app_order = {a: _app_rank(a) for a in pd.unique(frame["app_id"])}
    ranks = sorted(app_order, key=app_order.get)
    key = frame["app_id"].map({a: i for i, a in enumerate(ranks)})
    out = frame.assign(_app=key).sort_values(
        ["node_id", "_app", "sample_index"], kind="mergesort")
    return out.drop(columns="_app").reset_index(drop=True)


def _validate(frame: pd.DataFrame, lines: np.ndarray, allow_unknown_apps: bool,
              allow_missing: bool) -> pd.DataFrame:
    frame = frame.copy()
    frame["node_id"] = frame["node_id"].astype(str)
    frame["app_id"] = frame["app_id"].astype(str)
    if not allow_unknown_apps:
        bad = ~frame["app_id"].isin(APPS)
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise IngestError(f"line {lines[i]}: unknown app_id {frame['app_id'].iat[i]!r}")

    idx = frame["sample_index"]
    if idx.dtype.kind not in "iu":
        text = idx.astype(str).str.strip()
        bad = ~text.str.fullmatch(r"\d+")
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise IngestError(f"line {lines[i]}: sample_index {idx.iat[i]!r} is not a non-negative integer")
        frame["sample_index"] = text.astype(np.int64)
    elif (idx < 0).any():
        i = int(np.flatnonzero((idx < 0).to_numpy())[0])
        raise IngestError(f"line {lines[i]}: sample_index {idx.iat[i]!r} is not a non-negative integer")
    frame["sample_index"] = frame["sample_index"].astype(np.int64)

    # to_numeric only locates bad cells; its fast parser is not round-trip exact.
    values = pd.to_numeric(frame["value"], errors="coerce").astype(float)
    nan = values.isna().to_numpy()
    if nan.any():
        i = int(np.flatnonzero(nan)[0])
        raise IngestError(f"line {lines[i]}: non-numeric value {frame['value'].iat[i]!r}")
    v = frame["value"].astype(float).to_numpy() if frame["value"].dtype == object else values.to_numpy()
    bad = ~np.isfinite(v)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IngestError(f"line {lines[i]}: non-finite value {frame['value'].iat[i]!r}")
    bad = v <= 0
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IngestError(f"line {lines[i]}: non-positive value {frame['value'].iat[i]!r}")
    frame["value"] = v

    dup = frame.duplicated(["node_id", "app_id", "sample_index"], keep="first").to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        triple = (frame["node_id"].iat[i], frame["app_id"].iat[i], int(frame["sample_index"].iat[i]))
        raise IngestError(f"line {lines[i]}: duplicate sample {triple}")

    apps_present = frame["app_id"].nunique()
    per_node = frame.groupby("node_id", sort=True)["app_id"].nunique()
    incomplete = per_node[per_node < apps_present]
    if len(incomplete):
        if not allow_missing:
            node = incomplete.index[0]
            i = int(np.flatnonzero((frame["node_id"] == node).to_numpy())[0])
            raise IngestError(
                f"line {lines[i]}: node {node!r} lacks samples for "
                f"{apps_present - int(incomplete.iloc[0])} of {apps_present} apps")
        warnings.warn(f"dropping {len(incomplete)} incomplete node(s): "
                      f"{', '.join(map(str, incomplete.index[:5]))}"
                      + (" ..." if len(incomplete) > 5 else ""), stacklevel=3)
        frame = frame[~frame["node_id"].isin(incomplete.index)]
    if frame.empty:
        raise IngestError("no samples")
    return _canonical_sort(frame[list(CSV_HEADER)])


def ingest_samples(source: str | TextIO, allow_unknown_apps: bool = False,
                   allow_missing: bool = False) -> SampleSet:
    """Parse and validate sample CSV text (or an open text stream)."""
    stream = io.StringIO(source) if isinstance(source, str) else source
    try:
        # header=None: the header row fixes the field count and keeps line numbers exact.
        raw = pd.read_csv(stream, header=None, dtype=str, keep_default_na=False,
                          skip_blank_lines=False, on_bad_lines="error")
    except pd.errors.EmptyDataError:
        raise IngestError("line 1: missing header") from None
    except pd.errors.ParserError as exc:
        raise IngestError(f"malformed row: {exc}".strip()) from None
    if raw.shape[1] != len(CSV_HEADER) or tuple(raw.iloc[0].str.strip()) != CSV_HEADER:
        raise IngestError(f"line 1: header must be {','.join(CSV_HEADER)}")
    frame = raw.iloc[1:].reset_index(drop=True)
    frame.columns = list(CSV_HEADER)
    lines = np.arange(len(frame)) + 2
    empty = (frame == "").to_numpy() | frame.isna().to_numpy()
    bad_rows = empty.any(axis=1)
    if bad_rows.any():
        i = int(np.flatnonzero(bad_rows)[0])
        raise IngestError(f"line {lines[i]}: malformed row (expected 4 fields)")
    for col in ("node_id", "app_id"):
        frame[col] = frame[col].str.strip()
    return SampleSet(_validate(frame, lines, allow_unknown_apps, allow_missing))


@dataclass(frozen=True)
class FeatureMatrix:
    nodes: tuple[str, ...]
    features: tuple[Feature, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (len(self.nodes), len(self.features)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.nodes)} nodes x {len(self.features)} features")

    @property
    def labels(self) -> list[str]:
        return [f.label for f in self.features]

    def resolve(self, feature: str | Feature) -> Feature:
        if isinstance(feature, Feature):
            if feature not in self.features:
                raise KeyError(f"unknown feature {feature.label!r}")
            return feature
        f = parse_feature(feature, apps=dict.fromkeys(f.app for f in self.features))
        if f not in self.features:
            raise KeyError(f"unknown feature {feature!r}")
        return f

    def index(self, feature: str | Feature) -> int:
        return self.features.index(self.resolve(feature))

    def column(self, feature: str | Feature) -> np.ndarray:
        return self.values[:, self.index(feature)]

    def select(self, features: Sequence[str | Feature]) -> np.ndarray:
        return self.values[:, [self.index(f) for f in features]]

    def as_dict(self, feature: str | Feature) -> dict[str, float]:
        return dict(zip(self.nodes, self.column(feature).tolist()))

    def to_csv(self) -> str:
        df = pd.DataFrame(self.values, columns=self.labels)
        df.insert(0, "node_id", list(self.nodes))
        return df.to_csv(index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, source: str | TextIO) -> "FeatureMatrix":
        stream = io.StringIO(source) if isinstance(source, str) else source
        df = pd.read_csv(stream, dtype={"node_id": str}, float_precision="round_trip")
        if df.columns[0] != "node_id":
            raise ValueError("feature CSV must start with a node_id column")
        apps = list(dict.fromkeys(APPS)) + [c.rpartition(" ")[0] for c in df.columns[1:]]
        feats = tuple(parse_feature(c, apps) for c in df.columns[1:])
        return cls(tuple(df["node_id"]), feats, df.iloc[:, 1:].to_numpy(dtype=float))


def aggregate(samples: SampleSet) -> FeatureMatrix:
    """Min/Mean/StdDev/Max per node and app; StdDev uses the 1/n denominator."""
    f = samples.frame
    apps = samples.apps
    nodes = samples.nodes
    v = f["value"].to_numpy(dtype=float)
    group_change = ((f["node_id"].to_numpy()[1:] != f["node_id"].to_numpy()[:-1])
                    | (f["app_id"].to_numpy()[1:] != f["app_id"].to_numpy()[:-1]))
    starts = np.concatenate([[0], np.flatnonzero(group_change) + 1])
    if len(starts) != len(nodes) * len(apps):
        raise ValueError("sample set is not rectangular")
    counts = np.diff(np.append(starts, len(v)))
    mins = np.minimum.reduceat(v, starts)
    maxs = np.maximum.reduceat(v, starts)
    means = np.add.reduceat(v, starts) / counts
    means = np.clip(means, mins, maxs)
    dev = v - np.repeat(means, counts)
    std = np.sqrt(np.add.reduceat(dev * dev, starts) / counts)

    stacked = np.stack([mins, means, std, maxs], axis=1)  # (node*app, stat)
    values = stacked.reshape(len(nodes), len(apps) * len(STATS))
    features = tuple(Feature(a, s) for a in apps for s in STATS)
    return FeatureMatrix(tuple(nodes), features, values)


@dataclass(frozen=True)
class NodeBox:
    node_id: str
    rank_value: float
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    variance: float


@dataclass(frozen=True)
class BoxplotGroups:
    feature: Feature
    bottom: list[NodeBox]
    middle: list[NodeBox]
    top: list[NodeBox]

    def groups(self) -> dict[str, list[NodeBox]]:
        return {"bottom": self.bottom, "middle": self.middle, "top": self.top}

    def to_csv(self) -> str:
        rows = [(g, b.node_id, b.rank_value, b.minimum, b.q1, b.median, b.q3, b.maximum, b.variance)
                for g, boxes in self.groups().items() for b in boxes]
        df = pd.DataFrame(rows, columns=["group", "node_id", "rank_value", "min", "q1",
                                         "median", "q3", "max", "variance"])
        return df.to_csv(index=False, lineterminator="\n")


def _box(node: str, rank_value: float, x: np.ndarray) -> NodeBox:
    q = np.percentile(x, [0, 25, 50, 75, 100])
    return NodeBox(node, float(rank_value), *map(float, q), float(np.var(x)))


def boxplot_groups(matrix: FeatureMatrix, samples: SampleSet, feature: str | Feature,
                   bottom: int = 70, middle: int = 11, top: int = 11) -> BoxplotGroups:
    """Lowest, median-straddling and highest nodes ranked by ``feature``.

    The middle window starts at rank ceil((n - middle) / 2) but is clamped to
    lie between the bottom and top groups so the three never overlap.
    """
    feat = matrix.resolve(feature)
    n = len(matrix.nodes)
    if min(bottom, middle, top) <= 0:
        raise ValueError("group sizes must be positive")
    if bottom + middle + top > n:
        raise ValueError(f"groups of {bottom}+{middle}+{top} exceed fleet size {n}")
    col = matrix.column(feat)
    order = sorted(range(n), key=lambda i: (col[i], matrix.nodes[i]))
    start = math.ceil((n - middle) / 2)
    start = min(max(start, bottom), n - top - middle)

    per_node = {node: g["value"].to_numpy(dtype=float)
                for node, g in samples.frame[samples.frame["app_id"] == feat.app].groupby("node_id")}

    def boxes(ranks):
        out = []
        for r in ranks:
            i = order[r]
            out.append(_box(matrix.nodes[i], col[i], per_node[matrix.nodes[i]]))
        return out

    return BoxplotGroups(feat, boxes(range(bottom)), boxes(range(start, start + middle)),
                         boxes(range(n - top, n)))


def variance_growth(samples: SampleSet, node: str, app: str,
                    batch_sizes: Sequence[int]) -> list[tuple[int, float]]:
    """Population variance of the first b samples (sample_index order) per batch size."""
    x = samples.values_for(node, app)
    if len(x) == 0:
        raise KeyError(f"no samples for node {node!r} app {app!r}")
    if any(b <= 0 for b in batch_sizes):
        raise ValueError("batch sizes must be positive")
    if max(batch_sizes) > len(x):
        raise ValueError(f"batch size {max(batch_sizes)} exceeds {len(x)} available samples")
    return [(int(b), float(np.var(x[:b]))) for b in batch_sizes]


def sigma_score(value: float, mean: float, stddev: float) -> float:
    if not stddev > 0:
        raise ValueError("stddev must be positive")
    return (value - mean) / stddev
