"""Reading-error metrics and grouped report tables.

``ref`` is the absolute error over the dial range, ``rel`` the absolute error
over ``|y|``. Accuracy_eps counts ``ref <= 0.01`` (inclusive), Accuracy_theta
counts ``rel < 0.05`` (strict). A prediction of ``None`` (unparseable model
output) is a miss for both accuracies and is left out of the error means.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dialgen import CORRUPTION_KINDS

EPS_THRESHOLD = 0.01
THETA_THRESHOLD = 0.05
# absorbs binary drift of decimal readings, e.g. |1.1 - 1.0| / 10 = 0.010000000000000009
SLACK = 1e-12

GROUP_MODES = ("archetype", "environment", "none")


@dataclass(frozen=True)
class PredictionPair:
    y: float
    y_star: float | None
    range_span: float
    archetype_id: int = 0
    corruptions: tuple = ()


def ref_error(pair: PredictionPair) -> float:
    if not pair.range_span > 0:
        raise ValueError(f"range_span must be positive, got {pair.range_span}")
    if pair.y_star is None:
        return math.inf
    return abs(pair.y - pair.y_star) / pair.range_span


def rel_error(pair: PredictionPair) -> float | None:
    """Relative error, or None when the true reading is zero."""
    if pair.y == 0:
        return None
    if pair.y_star is None:
        return math.inf
    return abs(pair.y - pair.y_star) / abs(pair.y)


def eps_hit(ref: float) -> bool:
    return ref <= EPS_THRESHOLD + SLACK


def theta_hit(rel: float) -> bool:
    return rel < THETA_THRESHOLD - SLACK


def accuracy_eps(pairs: Sequence[PredictionPair]) -> float:
    if not pairs:
        raise ValueError("accuracy over an empty set")
    return 100.0 * sum(eps_hit(ref_error(p)) for p in pairs) / len(pairs)


def accuracy_theta(pairs: Sequence[PredictionPair]) -> float:
    rels = [r for r in (rel_error(p) for p in pairs) if r is not None]
    if not rels:
        raise ValueError("accuracy_theta needs at least one pair with nonzero truth")
    return 100.0 * sum(theta_hit(r) for r in rels) / len(rels)


@dataclass
class GroupRow:
    key: str
    count: int
    acc_eps: float | None = None
    acc_theta: float | None = None
    mean_ref: float | None = None
    mean_rel: float | None = None
    n_invalid: int = 0
    n_rel_undefined: int = 0


def summarize(pairs: Sequence[PredictionPair], key: str = "all") -> GroupRow:
    """Vectorised aggregates for one group. Sums use ``math.fsum`` (exactly rounded)."""
    n = len(pairs)
    if n == 0:
        return GroupRow(key, 0)
    y = np.array([p.y for p in pairs], dtype=np.float64)
    ys = np.array([np.nan if p.y_star is None else p.y_star for p in pairs], dtype=np.float64)
    span = np.array([p.range_span for p in pairs], dtype=np.float64)
    if np.any(span <= 0):
        raise ValueError("range_span must be positive")
    valid = ~np.isnan(ys)
    err = np.abs(y - ys)
    ref = err / span
    defined = y != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = err / np.abs(y)

    eps_hits = int(np.count_nonzero(valid & (ref <= EPS_THRESHOLD + SLACK)))
    n_def = int(np.count_nonzero(defined))
    theta_hits = int(np.count_nonzero(valid & defined & (rel < THETA_THRESHOLD - SLACK)))
    n_valid = int(np.count_nonzero(valid))
    vd = valid & defined
    n_vd = int(np.count_nonzero(vd))
    return GroupRow(
        key=key,
        count=n,
        acc_eps=100.0 * eps_hits / n,
        acc_theta=100.0 * theta_hits / n_def if n_def else None,
        mean_ref=math.fsum(ref[valid].tolist()) / n_valid if n_valid else None,
        mean_rel=math.fsum(rel[vd].tolist()) / n_vd if n_vd else None,
        n_invalid=n - n_valid,
        n_rel_undefined=n - n_def,
    )


@dataclass
class MetricReport:
    group_by: str
    rows: list[GroupRow]
    average: GroupRow
    weighted: GroupRow
    extra: dict = field(default_factory=dict)

    COLUMNS = ("group", "count", "acc_eps", "acc_theta", "ref", "rel", "invalid")

    def table(self) -> list[list]:
        out = []
        for r in [*self.rows, self.average, self.weighted]:
            out.append([r.key, r.count, r.acc_eps, r.acc_theta, r.mean_ref, r.mean_rel, r.n_invalid])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.table():
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def to_markdown(self) -> str:
        def fmt(v, col):
            if v is None:
                return "-"
            if col in ("acc_eps", "acc_theta"):
                return f"{v:.1f}"
            if col in ("ref", "rel"):
                return f"{v:.3f}"
            return str(v)

        header = ["Group", "N", "Acc_eps (%)", "Acc_theta (%)", "Ref", "Rel", "Invalid"]
        body = [[fmt(v, c) for v, c in zip(row, self.COLUMNS)] for row in self.table()]
        widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
        lines = ["| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |",
                 "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        for b in body:
            lines.append("| " + " | ".join(v.ljust(w) for v, w in zip(b, widths)) + " |")
        return "\n".join(lines) + "\n"


def _unweighted_mean(rows: Iterable[GroupRow], key: str) -> GroupRow:
    rows = [r for r in rows if r.count > 0]

    def avg(attr):
        vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
        return math.fsum(vals) / len(vals) if vals else None

    return GroupRow(key, sum(r.count for r in rows), avg("acc_eps"), avg("acc_theta"),
                    avg("mean_ref"), avg("mean_rel"), sum(r.n_invalid for r in rows),
                    sum(r.n_rel_undefined for r in rows))


def build_report(pairs: Sequence[PredictionPair], group_by: str = "none") -> MetricReport:
    """One row per group (ascending key), an unweighted ``Average`` row and a pooled ``Weighted`` row.

    In ``environment`` mode a pair counts toward every corruption it carries;
    pairs without corruptions form a ``clean`` row. All eight condition rows
    are always listed, empty ones with count 0.
    """
    if group_by not in GROUP_MODES:
        raise ValueError(f"unknown group_by {group_by!r}; expected one of {GROUP_MODES}")
    if group_by == "none":
        rows = [summarize(pairs, "all")]
    elif group_by == "archetype":
        ids = sorted({p.archetype_id for p in pairs})
        rows = [summarize([p for p in pairs if p.archetype_id == a], f"meter_{a}") for a in ids]
    else:
        rows = [summarize([p for p in pairs if kind in p.corruptions], kind) for kind in CORRUPTION_KINDS]
        clean = [p for p in pairs if not p.corruptions]
        if clean:
            rows.append(summarize(clean, "clean"))
    weighted = summarize(pairs, "Weighted")
    return MetricReport(group_by, rows, _unweighted_mean(rows, "Average"), weighted)
