"""Confusion-matrix bookkeeping and per-class / aggregate metrics.

Metrics derived from a confusion matrix are computed in exact rational
arithmetic and converted to float once at the end, so identities that
hold algebraically (weighted recall equals accuracy, for instance) also
hold bitwise.  The 0/0 cases (no predictions for a class, no support,
P + R = 0) are all defined as 0.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "ConfusionMatrix",
    "ClassMetrics",
    "AggregateMetrics",
    "MetricsReport",
    "class_report",
    "aggregate_report",
    "report_from_matrix",
    "write_report_csv",
    "format_report",
    "round_display",
]


class ConfusionMatrix:
    """Counts of (true class, predicted class) pairs.

    ``matrix[i][j]`` counts items whose true class is ``i`` and predicted
    class is ``j``; row sums are therefore class supports.
    """

    def __init__(self, class_names):
        names = list(class_names)
        if len(names) < 2:
            raise ConfigError(f"need at least two classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise ConfigError(f"class names must be unique, got {names}")
        self.class_names = names
        self.matrix = np.zeros((len(names), len(names)), dtype=np.int64)

    def accumulate(self, true_labels, pred_labels):
        """Adds a batch of (true, predicted) label pairs."""
        t = np.asarray(true_labels)
        p = np.asarray(pred_labels)
        if t.shape != p.shape or t.ndim != 1:
            raise DimensionError(
                f"label arrays must be 1-D and equal length, got {t.shape} and {p.shape}")
        if t.size and not (np.issubdtype(t.dtype, np.integer)
                           and np.issubdtype(p.dtype, np.integer)):
            raise DimensionError(
                f"labels must be integers, got dtypes {t.dtype} and {p.dtype}")
        k = len(self.class_names)
        for arr, kind in ((t, "true"), (p, "predicted")):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = int(arr[(arr < 0) | (arr >= k)][0])
                raise IndexError(f"{kind} label {bad} outside [0, {k})")
        np.add.at(self.matrix, (t, p), 1)

    @property
    def total(self):
        return int(self.matrix.sum())

    @property
    def supports(self):
        return [int(s) for s in self.matrix.sum(axis=1)]


@dataclass(frozen=True)
class ClassMetrics:
    """Precision, recall, F1, and support for one class."""

    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class AggregateMetrics:
    """Macro (unweighted) and support-weighted averages, plus accuracy."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple
    aggregates: AggregateMetrics


def _f1(p, r):
    if p + r == 0:
        return Fraction(0)
    return 2 * p * r / (p + r)


def f1_score(precision, recall):
    """Harmonic mean of precision and recall; 0.0 when both are 0."""
    if precision < 0 or recall < 0:
        raise ConfigError("precision and recall must be non-negative")
    return float(_f1(Fraction(precision), Fraction(recall)))


def _rational_rows(cm):
    """Per-class (name, precision, recall, f1, support) as Fractions."""
    m = cm.matrix
    rows = []
    for i, name in enumerate(cm.class_names):
        tp = int(m[i, i])
        col = int(m[:, i].sum())
        row = int(m[i].sum())
        p = Fraction(tp, col) if col else Fraction(0)
        r = Fraction(tp, row) if row else Fraction(0)
        rows.append((name, p, r, _f1(p, r), row))
    return rows


def class_report(cm):
    """Per-class metrics for a confusion matrix, as floats."""
    return [ClassMetrics(name, float(p), float(r), float(f), s)
            for name, p, r, f, s in _rational_rows(cm)]


def _aggregate(rows):
    """Aggregates (name, P, R, F1, support) rows; values may be Fractions
    or floats, and exactness survives whenever the inputs are exact."""
    if not rows:
        raise ConfigError("cannot aggregate an empty report")
    k = len(rows)
    total = sum(r[4] for r in rows)
    if total == 0:
        raise ConfigError("cannot aggregate a report with zero total support")
    macro = [sum(r[i] for r in rows) / k for i in (1, 2, 3)]
    weighted = [sum(r[i] * r[4] for r in rows) / total for i in (1, 2, 3)]
    return AggregateMetrics(
        accuracy=float(weighted[1]),
        macro_precision=float(macro[0]),
        macro_recall=float(macro[1]),
        macro_f1=float(macro[2]),
        weighted_precision=float(weighted[0]),
        weighted_recall=float(weighted[1]),
        weighted_f1=float(weighted[2]),
    )


def aggregate_report(rows):
    """Aggregates a list of :class:`ClassMetrics`.

    Accuracy is reported as the weighted recall, which equals
    trace/total when the rows came from a confusion matrix.
    """
    return _aggregate([(r.name, r.precision, r.recall, r.f1, r.support) for r in rows])


def report_from_matrix(cm):
    """Full report for a confusion matrix.

    Both levels are computed from the same exact rationals, which makes
    ``aggregates.accuracy`` equal ``trace/total`` bit for bit.
    """
    rational = _rational_rows(cm)
    per_class = tuple(ClassMetrics(name, float(p), float(r), float(f), s)
                      for name, p, r, f, s in rational)
    return MetricsReport(per_class=per_class, aggregates=_aggregate(rational))


def round_display(x, digits=2):
    """Rounds half away from zero to ``digits`` decimal places."""
    scale = 10 ** digits
    return math.copysign(math.floor(abs(x) * scale + 0.5), x) / scale


def write_report_csv(report, path):
    """Writes the report as CSV with 4-decimal values.

    Layout: header ``class,precision,recall,f1,support``; one row per
    class; ``macro`` and ``weighted`` rows carrying their averages with
    total support; a final ``accuracy,,,,<value>`` row.
    """
    agg = report.aggregates
    total = sum(r.support for r in report.per_class)
    lines = ["class,precision,recall,f1,support"]
    for r in report.per_class:
        lines.append(f"{r.name},{r.precision:.4f},{r.recall:.4f},{r.f1:.4f},{r.support}")
    lines.append(f"macro,{agg.macro_precision:.4f},{agg.macro_recall:.4f},"
                 f"{agg.macro_f1:.4f},{total}")
    lines.append(f"weighted,{agg.weighted_precision:.4f},{agg.weighted_recall:.4f},"
                 f"{agg.weighted_f1:.4f},{total}")
    lines.append(f"accuracy,,,,{agg.accuracy:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def format_report(report):
    """Two-decimal terminal table (half-away-from-zero rounding)."""
    agg = report.aggregates
    total = sum(r.support for r in report.per_class)
    width = max(8, max(len(r.name) for r in report.per_class), len("weighted"))
    fmt = f"{{:<{width}}}  {{:>9}}  {{:>6}}  {{:>6}}  {{:>7}}"
    out = [fmt.format("class", "precision", "recall", "f1", "support")]
    for r in report.per_class:
        out.append(fmt.format(r.name, f"{round_display(r.precision):.2f}",
                              f"{round_display(r.recall):.2f}",
                              f"{round_display(r.f1):.2f}", r.support))
    out.append(fmt.format("macro", f"{round_display(agg.macro_precision):.2f}",
                          f"{round_display(agg.macro_recall):.2f}",
                          f"{round_display(agg.macro_f1):.2f}", total))
    out.append(fmt.format("weighted", f"{round_display(agg.weighted_precision):.2f}",
                          f"{round_display(agg.weighted_recall):.2f}",
                          f"{round_display(agg.weighted_f1):.2f}", total))
    out.append(f"accuracy: {round_display(agg.accuracy):.2f}")
    return "\n".join(out)
