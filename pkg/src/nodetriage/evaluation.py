"""Confusion matrices and ranked method-comparison tables."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def recall(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0

    @property
    def precision(self) -> float:
        flagged = self.tp + self.fp
        return self.tp / flagged if flagged else 0.0

    @property
    def error_rate(self) -> float:
        return error_rate(self)


def confusion(predicted: Iterable[str], truth: Iterable[str], universe: Iterable[str]) -> ConfusionMatrix:
    predicted, truth, universe = set(predicted), set(truth), set(universe)
    if not predicted <= universe:
        raise ValueError(f"{len(predicted - universe)} predicted node(s) outside the universe")
    if not truth <= universe:
        raise ValueError(f"{len(truth - universe)} truth node(s) outside the universe")
    return ConfusionMatrix(
        tp=len(predicted & truth),
        fp=len(predicted - truth),
        fn=len(truth - predicted),
        tn=len(universe - (predicted | truth)),
    )


def error_rate(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty evaluation universe")
    return (cm.fp + cm.fn) / cm.total


def render_confusion(cm: ConfusionMatrix, title: str = "") -> str:
    """Predicted rows against label columns, as in a printed confusion table."""
    rows = [("", "Positive Label", "Negative Label"),
            ("Predicted Positive", str(cm.tp), str(cm.fp)),
            ("Predicted Negative", str(cm.fn), str(cm.tn))]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = [title] if title else []
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    lines.append(sep)
    for r in rows:
        lines.append("| " + " | ".join(c.rjust(w) if i else c.ljust(w)
                                       for i, (c, w) in enumerate(zip(r, widths))) + " |")
        lines.append(sep)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    subset: tuple[str, ...]
    cm: ConfusionMatrix

    @property
    def recall(self) -> float:
        return self.cm.recall

    @property
    def precision(self) -> float:
        return self.cm.precision

    @property
    def error_rate(self) -> float:
        return self.cm.error_rate if self.cm.total else 0.0


CSV_COLUMNS = ("method", "subset", "tp", "fp", "fn", "tn", "error_rate", "recall", "precision")


@dataclass(frozen=True)
class MethodComparison:
    rows: tuple[ComparisonRow, ...]

    def to_csv(self) -> str:
        import csv
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, ";".join(r.subset), r.cm.tp, r.cm.fp, r.cm.fn, r.cm.tn,
                        f"{r.error_rate:.6g}", f"{r.recall:.6g}", f"{r.precision:.6g}"])
        return buf.getvalue()

    def to_text(self, limit: int | None = None) -> str:
        head = ("method", "subset", "TP", "FP", "FN", "TN", "error", "recall", "precision")
        body = [(r.method, " / ".join(r.subset), str(r.cm.tp), str(r.cm.fp), str(r.cm.fn),
                 str(r.cm.tn), f"{r.error_rate:.4%}", f"{r.recall:.3f}", f"{r.precision:.3f}")
                for r in self.rows[:limit]]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        out = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                         for i, (c, w) in enumerate(zip(row, widths))).rstrip()
               for row in [head, *body]]
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"


def rank_rows(rows: Iterable[ComparisonRow]) -> MethodComparison:
    """Descending recall, then ascending false positives; stable otherwise."""
    return MethodComparison(tuple(sorted(rows, key=lambda r: (-r.recall, r.cm.fp))))


def compare_methods(entries: Sequence[tuple[str, Sequence[str], Iterable[str]]],
                    truth: Iterable[str], universe: Iterable[str]) -> MethodComparison:
    if not entries:
        raise ValueError("no methods to compare")
    truth, universe = set(truth), set(universe)
    return rank_rows(ComparisonRow(tag, tuple(subset), confusion(pred, truth, universe))
                     for tag, subset, pred in entries)
