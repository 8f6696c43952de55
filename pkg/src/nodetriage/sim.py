"""Deterministic synthetic fleets built from per-application Gaussian mixtures.

Mixture peak placements are synthetic stand-ins: only the shapes (number of
modes, presence of a low-side tail) follow observed production histograms.
"""
from __future__ import annotations

import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import pandas as pd

from .fleet import APPS, SampleSet

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Keeps the slow-node draw independent from every per-node stream.
_TRUTH_STREAM = 2**32 - 1


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian components ``(weight, mean, stddev)`` plus an optional left tail.

    The tail component ``(weight, rate)`` draws ``anchor - Exponential(rate)``
    where the anchor is the lowest component mean.
    """

    components: tuple[tuple[float, float, float], ...]
    tail: tuple[float, float] | None = None

    def __post_init__(self):
        comps = tuple(tuple(float(v) for v in c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if self.tail is not None:
            object.__setattr__(self, "tail", tuple(float(v) for v in self.tail))
        if not comps:
            raise ValueError("mixture needs at least one Gaussian component")
        if any(len(c) != 3 for c in comps):
            raise ValueError("components are (weight, mean, stddev) triples")
        total = sum(c[0] for c in comps) + (self.tail[0] if self.tail else 0.0)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {total!r}, expected 1")
        if any(c[0] < 0 for c in comps) or (self.tail and self.tail[0] < 0):
            raise ValueError("mixture weights must be non-negative")
        if any(not c[2] > 0 for c in comps):
            raise ValueError("component stddev must be positive")
        if self.tail and not self.tail[1] > 0:
            raise ValueError("tail rate must be positive")

    @property
    def anchor(self) -> float:
        return min(c[1] for c in self.components)

    def _moments(self) -> tuple[float, float]:
        m1 = sum(w * mu for w, mu, _ in self.components)
        m2 = sum(w * (mu * mu + sd * sd) for w, mu, sd in self.components)
        if self.tail:
            w, rate = self.tail
            scale = 1.0 / rate
            mt = self.anchor - scale
            m1 += w * mt
            m2 += w * (mt * mt + scale * scale)
        return m1, m2

    def mean(self) -> float:
        return self._moments()[0]

    def std(self) -> float:
        m1, m2 = self._moments()
        return math.sqrt(max(m2 - m1 * m1, 0.0))

    def degraded(self, shift: float, factor: float) -> "MixtureSpec":
        """Every mean moved down by ``shift``; stddevs and tail scale times ``factor``."""
        comps = tuple((w, mu - shift, sd * factor) for w, mu, sd in self.components)
        tail = (self.tail[0], self.tail[1] / factor) if self.tail else None
        return MixtureSpec(comps, tail)


def mixture_draws(spec: MixtureSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorised draws, rejection-resampled until strictly positive."""
    weights = [c[0] for c in spec.components] + ([spec.tail[0]] if spec.tail else [])
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    mu = np.array([c[1] for c in spec.components])
    sd = np.array([c[2] for c in spec.components])
    n_gauss = len(mu)

    def draw(k: int) -> np.ndarray:
        which = np.minimum(np.searchsorted(cum, rng.random(k), side="right"), len(cum) - 1)
        z = rng.standard_normal(k)
        e = rng.standard_exponential(k)
        g = np.minimum(which, n_gauss - 1)
        out = mu[g] + sd[g] * z
        if spec.tail:
            is_tail = which == n_gauss
            out = np.where(is_tail, spec.anchor - e / spec.tail[1], out)
        return out

    x = draw(size)
    bad = x <= 0
    while bad.any():
        x[bad] = draw(int(bad.sum()))
        bad = x <= 0
    return x


def mixture_sample(spec: MixtureSpec, rng: np.random.Generator) -> float:
    return float(mixture_draws(spec, rng, 1)[0])


def default_app_mixtures() -> dict[str, MixtureSpec]:
    """Catalog-wide default mixtures (GFlops/s, memory apps in GB/s).

    Multimodal specs keep adjacent peaks at least 6 stddevs apart.
    """
    return {
        "OMP_DGEMM_FMA": MixtureSpec(((0.30, 1800.0, 15.0), (0.45, 1900.0, 15.0),
                                      (0.25, 2000.0, 15.0))),
        "OMP_DGEMM_LIB": MixtureSpec(((1.0, 1650.0, 20.0),)),
        "OMP_NBODY_FMA": MixtureSpec(((0.10, 1100.0, 8.0), (0.20, 1160.0, 8.0),
                                      (0.30, 1220.0, 8.0), (0.25, 1280.0, 8.0),
                                      (0.15, 1340.0, 8.0))),
        "OMP_MEM_UNOPT": MixtureSpec(((0.97, 300.0, 4.0),), tail=(0.03, 1 / 12)),
        "OMP_MEM_OPT": MixtureSpec(((0.20, 380.0, 4.0), (0.30, 410.0, 4.0),
                                    (0.30, 440.0, 4.0), (0.15, 470.0, 4.0)),
                                   tail=(0.05, 1 / 20)),
        "MPI_DGEMM_A": MixtureSpec(((1.0, 1035.0, 10.0),)),
        "MPI_DGEMM_B": MixtureSpec(((1.0, 980.0, 9.0),)),
        "MPI_NBODY_FMA": MixtureSpec(((0.5, 1250.0, 8.0), (0.5, 1310.0, 8.0))),
        "MPI_LUFAC": MixtureSpec(((0.5, 700.0, 6.0), (0.5, 740.0, 6.0))),
        "MPI_DGEMM_UNOPT": MixtureSpec(((0.5, 450.0, 5.0), (0.5, 480.0, 5.0))),
        "DEFLATED_HPL": MixtureSpec(((1.0, 560.0, 12.0),)),
        # Near-normal with a thin low-side tail: the tail is what makes the
        # lowest-mean healthy nodes also the noisiest ones.
        "HPL": MixtureSpec(((0.98, 830.0, 7.5),), tail=(0.02, 1 / 15)),
    }


@dataclass(frozen=True)
class FleetConfig:
    node_count: int = 9327
    outlier_count: int = 33
    samples_per_node: int = 50
    mixtures: Mapping[str, MixtureSpec] = field(default_factory=default_app_mixtures)
    slow_shift_sigma: float = 3.5
    slow_variance_factor: float = 2.0
    seed: int = 42

    def __post_init__(self):
        if self.node_count <= 0:
            raise ValueError("node_count must be positive")
        if not 0 <= self.outlier_count < self.node_count:
            raise ValueError("outlier_count must be in [0, node_count)")
        if self.samples_per_node <= 0:
            raise ValueError("samples_per_node must be positive")
        if not self.slow_shift_sigma > 0:
            raise ValueError("slow_shift_sigma must be positive")
        if not self.slow_variance_factor >= 1:
            raise ValueError("slow_variance_factor must be >= 1")
        if not self.mixtures:
            raise ValueError("at least one application mixture is required")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def apps(self) -> list[str]:
        known = [a for a in APPS if a in self.mixtures]
        return known + sorted(a for a in self.mixtures if a not in APPS)

    def node_ids(self) -> list[str]:
        width = len(str(self.node_count))
        return [f"n{i:0{width}d}" for i in range(1, self.node_count + 1)]


def node_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for node ``index``; order of evaluation never matters."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def slow_node_indices(config: FleetConfig) -> np.ndarray:
    rng = node_rng(config.seed, _TRUTH_STREAM)
    return np.sort(rng.choice(config.node_count, size=config.outlier_count, replace=False))


def simulate_fleet(config: FleetConfig, threads: int = 1) -> tuple[SampleSet, list[str]]:
    """Return the sample set and the sorted ids of injected slow nodes."""
    apps = config.apps
    healthy = [config.mixtures[a] for a in apps]
    slow = [m.degraded(config.slow_shift_sigma * m.std(), config.slow_variance_factor)
            for m in healthy]
    slow_idx = slow_node_indices(config)
    is_slow = np.zeros(config.node_count, dtype=bool)
    is_slow[slow_idx] = True
    s = config.samples_per_node
    values = np.empty((config.node_count, len(apps), s))

    def fill(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            rng = node_rng(config.seed, i)
            specs = slow if is_slow[i] else healthy
            for j, spec in enumerate(specs):
                values[i, j] = mixture_draws(spec, rng, s)

    bounds = np.linspace(0, config.node_count, max(1, threads) + 1).astype(int)
    if threads <= 1:
        fill(0, config.node_count)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, bounds[:-1], bounds[1:]))

    ids = config.node_ids()
    n, a = config.node_count, len(apps)
    frame = pd.DataFrame({
        "node_id": np.repeat(np.array(ids, dtype=object), a * s),
        "app_id": np.tile(np.repeat(np.array(apps, dtype=object), s), n),
        "sample_index": np.tile(np.arange(s, dtype=np.int64), n * a),
        "value": values.ravel(),
    })
    truth = [ids[i] for i in slow_idx]
    return SampleSet.from_canonical(frame), truth


def truth_to_text(truth: list[str]) -> str:
    return "".join(f"{node}\n" for node in sorted(truth))


def truth_from_text(text: str) -> list[str]:
    return sorted(line.strip() for line in text.splitlines() if line.strip())


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_toml(config: FleetConfig) -> str:
    lines = ["[fleet]"]
    for key in ("node_count", "outlier_count", "samples_per_node", "slow_shift_sigma",
                "slow_variance_factor", "seed"):
        lines.append(f"{key} = {_fmt(getattr(config, key))}")
    for app in config.apps:
        spec = config.mixtures[app]
        lines += ["", f"[apps.{app}]", f"components = {_fmt([list(c) for c in spec.components])}"]
        if spec.tail:
            lines.append(f"tail = {_fmt(list(spec.tail))}")
    return "\n".join(lines) + "\n"


def config_from_toml(text: str, base: FleetConfig | None = None) -> FleetConfig:
    """Parse a ``fleet.toml`` document; missing keys fall back to ``base``/defaults."""
    doc = tomllib.loads(text)
    base = base or FleetConfig()
    unknown = set(doc) - {"fleet", "apps"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    fleet = dict(doc.get("fleet", {}))
    allowed = {"node_count", "outlier_count", "samples_per_node", "slow_shift_sigma",
               "slow_variance_factor", "seed"}
    if set(fleet) - allowed:
        raise ValueError(f"unknown [fleet] keys: {sorted(set(fleet) - allowed)}")
    mixtures = dict(base.mixtures)
    apps_doc = doc.get("apps")
    if apps_doc:
        mixtures = {}
        for app, body in apps_doc.items():
            tail = body.get("tail")
            mixtures[app] = MixtureSpec(tuple(tuple(c) for c in body["components"]),
                                        tuple(tail) if tail else None)
    for key in ("slow_shift_sigma", "slow_variance_factor"):
        if key in fleet:
            fleet[key] = float(fleet[key])
    return replace(base, mixtures=mixtures, **fleet)
