"""Performance-ordered node lists, scheduler weight files and mitigation plans."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

from .outliers import OutlierReport

WEIGHT_MIN, WEIGHT_MAX = 1, 1000
CATEGORIES = ("replace", "trim", "interactive", "queue_tail", "none")


@dataclass(frozen=True)
class PriorityEntry:
    node_id: str
    score: float
    weight: int


@dataclass(frozen=True)
class NodePriorityList:
    entries: tuple[PriorityEntry, ...]

    @property
    def nodes(self) -> list[str]:
        return [e.node_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def _rank_weight(rank: int, n: int) -> int:
    if n == 1:
        return WEIGHT_MAX
    w = WEIGHT_MAX - rank * (WEIGHT_MAX - WEIGHT_MIN) / (n - 1)
    return int(math.floor(w + 0.5))


def priority_order(scores: Mapping[str, float]) -> NodePriorityList:
    """Best (highest) score first, ties by node id; weights fall linearly from 1000 to 1."""
    if not scores:
        raise ValueError("no scores")
    bad = [n for n, s in scores.items() if not math.isfinite(s)]
    if bad:
        raise ValueError(f"non-finite score for node {bad[0]!r}")
    order = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    n = len(order)
    return NodePriorityList(tuple(PriorityEntry(node, float(s), _rank_weight(i, n))
                                  for i, (node, s) in enumerate(order)))


def scheduler_weights(plist: NodePriorityList) -> str:
    return "".join(f"NodeName={e.node_id} Weight={e.weight}\n" for e in plist.entries)


_LINE = re.compile(r"^NodeName=(\S+) Weight=(\d+)$")


def parse_scheduler_weights(text: str) -> list[tuple[str, int]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        m = _LINE.match(line.strip())
        if not m:
            raise ValueError(f"line {lineno}: expected 'NodeName=<id> Weight=<int>'")
        out.append((m.group(1), int(m.group(2))))
    return out


@dataclass(frozen=True)
class MitigationBands:
    """Sigma cut points; a node below ``replace`` sigmas is replaced, and so on."""

    replace: float = -5.0
    trim: float = -3.5
    interactive: float = -2.0
    queue_tail: float = -1.0

    def __post_init__(self):
        if not self.replace <= self.trim <= self.interactive <= self.queue_tail:
            raise ValueError("bands must be ordered replace <= trim <= interactive <= queue_tail")

    def category(self, sigma: float) -> str:
        if sigma < self.replace:
            return "replace"
        if sigma < self.trim:
            return "trim"
        if sigma < self.interactive:
            return "interactive"
        if sigma < self.queue_tail:
            return "queue_tail"
        return "none"


@dataclass(frozen=True)
class MitigationPlan:
    assignments: dict[str, tuple[str, float]]
    bands: MitigationBands

    def category(self, node: str) -> str:
        return self.assignments[node][0]

    def by_category(self) -> dict[str, list[str]]:
        out = {c: [] for c in CATEGORIES}
        for node, (cat, _) in sorted(self.assignments.items()):
            out[cat].append(node)
        return out

    def to_json(self) -> str:
        doc = {
            "bands": {"replace": self.bands.replace, "trim": self.bands.trim,
                      "interactive": self.bands.interactive, "queue_tail": self.bands.queue_tail},
            "nodes": {n: {"category": c, "sigma": s} for n, (c, s) in sorted(self.assignments.items())},
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def mitigation_plan(reports: Iterable[OutlierReport], scores: Mapping[str, float],
                    bands: MitigationBands = MitigationBands()) -> MitigationPlan:
    """Categorise every node flagged by any report by its sigma score."""
    flagged = sorted({f.node_id for r in reports for f in r.flagged})
    missing = [n for n in flagged if n not in scores]
    if missing:
        raise KeyError(f"no sigma score for flagged node {missing[0]!r}")
    return MitigationPlan({n: (bands.category(scores[n]), float(scores[n])) for n in flagged}, bands)


def equivalent_node_loss(fleet_size: int, slowdown_fraction: float) -> float:
    """Throughput lost, in nodes, when one node ``slowdown_fraction`` slower gates a synchronous job."""
    if fleet_size <= 0:
        raise ValueError("fleet_size must be positive")
    if not 0 <= slowdown_fraction < 1:
        raise ValueError("slowdown_fraction must be in [0, 1)")
    return fleet_size * slowdown_fraction
