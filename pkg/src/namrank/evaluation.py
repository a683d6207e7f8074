"""Ranking and calibration metrics: AUC, GAUC, PCOC by popularity bucket."""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .numerics import ContractError

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalRecord:
    p_ctr: float
    p_ctcvr: float
    click_label: int
    conversion_label: int
    group_key: str
    bucket: int
    item_id: str = ""


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2).

    Computed from average ranks: ``(R+ - P(P+1)/2) / (P N)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(scores, labels, groups) -> float:
    """Impression-weighted mean of per-group AUC over groups with both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    order = np.argsort(groups, kind="stable")
    g_sorted = groups[order]
    bounds = np.flatnonzero(g_sorted[1:] != g_sorted[:-1]) + 1
    num = weight = 0.0
    for idx in np.split(order, bounds):
        y = labels[idx]
        n_pos = int((y == 1).sum())
        if n_pos == 0 or n_pos == y.size:
            continue
        num += y.size * auc(scores[idx], y)
        weight += y.size
    if weight == 0:
        raise UndefinedMetricError("no group contains both a positive and a negative")
    return num / weight


def gauc_records(records: Sequence[EvalRecord], task: str = "ctcvr") -> float:
    scores, labels = _task_arrays(records, task)
    return gauc(scores, labels, [r.group_key for r in records])


def _task_arrays(records, task):
    if task == "ctr":
        return [r.p_ctr for r in records], [r.click_label for r in records]
    if task == "ctcvr":
        return [r.p_ctcvr for r in records], [r.conversion_label for r in records]
    raise ValueError(f"unknown task {task!r}")


@dataclass
class PcocRow:
    bucket: int
    label: str
    impressions: int
    exposure_share: float
    p_ctcvr: float
    ctcvr: float
    pcoc: float | None


def pcoc(predicted: float, observed: float) -> float:
    """Predicted over observed conversion rate."""
    if observed == 0:
        raise UndefinedMetricError("observed conversion rate is zero")
    return predicted / observed


def pcoc_rows(records: Sequence[EvalRecord], labels: Sequence[str]) -> list[PcocRow]:
    """One row per bucket; PCOC is ``None`` where a bucket has no conversions."""
    n_b = len(labels)
    imps = np.zeros(n_b)
    pred = np.zeros(n_b)
    conv = np.zeros(n_b)
    for r in records:
        imps[r.bucket] += 1
        pred[r.bucket] += r.p_ctcvr
        conv[r.bucket] += r.conversion_label
    total = imps.sum()
    rows = []
    for b in range(n_b):
        if imps[b] == 0:
            logger.warning("bucket %s has no impressions", labels[b])
            rows.append(PcocRow(b, labels[b], 0, 0.0, float("nan"), float("nan"), None))
            continue
        p, c = pred[b] / imps[b], conv[b] / imps[b]
        value = None
        if c > 0:
            value = p / c
        else:
            logger.warning("bucket %s has no conversions; PCOC undefined", labels[b])
        rows.append(PcocRow(b, labels[b], int(imps[b]), imps[b] / total, p, c, value))
    return rows


@dataclass
class MetricsReport:
    auc_ctr: float | None
    auc_ctcvr: float | None
    gauc_ctr: float | None
    gauc_ctcvr: float | None
    pcoc: list[PcocRow] = field(default_factory=list)

    def metric(self, name: str) -> float | None:
        return getattr(self, name)


METRIC_NAMES = ("auc_ctr", "auc_ctcvr", "gauc_ctr", "gauc_ctcvr")


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError as exc:
        logger.warning("metric undefined: %s", exc)
        return None


def evaluate_records(records: Sequence[EvalRecord], bucket_labels: Sequence[str]) -> MetricsReport:
    """All metrics; undefined ones are ``None`` rather than errors."""
    groups = [r.group_key for r in records]
    out = {}
    for task in ("ctr", "ctcvr"):
        s, y = _task_arrays(records, task)
        out[f"auc_{task}"] = _safe(auc, s, y)
        out[f"gauc_{task}"] = _safe(gauc, s, y, groups)
    return MetricsReport(**out, pcoc=pcoc_rows(records, bucket_labels))


def pcoc_diff_percent(a: float, b: float) -> float:
    """Relative PCOC change from ``a`` to ``b`` in percent."""
    return (b - a) / a * 100.0


@dataclass
class Comparison:
    metric_deltas: dict[str, float | None]
    pcoc: list[tuple[str, float | None, float | None, float | None]]


def compare_models(report_a: MetricsReport, report_b: MetricsReport) -> Comparison:
    """Per-bucket PCOC change of ``b`` relative to ``a`` and AUC/GAUC deltas."""
    if [r.label for r in report_a.pcoc] != [r.label for r in report_b.pcoc]:
        raise ContractError("reports use different popularity buckets")
    deltas = {}
    for m in METRIC_NAMES:
        va, vb = report_a.metric(m), report_b.metric(m)
        deltas[m] = None if va is None or vb is None else vb - va
    rows = []
    for ra, rb in zip(report_a.pcoc, report_b.pcoc):
        diff = None
        if ra.pcoc is not None and rb.pcoc is not None:
            diff = pcoc_diff_percent(ra.pcoc, rb.pcoc)
        rows.append((ra.label, ra.pcoc, rb.pcoc, diff))
    return Comparison(deltas, rows)


# --- rendering -------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def to_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    cells = [list(header)] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


METRICS_HEADER = ("metric", "value")
PCOC_HEADER = ("Level", "Impressions", "ExposurePercentage", "pCTCVR", "CTCVR", "PCOC")
COMPARE_HEADER = ("Level", "PCOC_A", "PCOC_B", "PCOC_Diff_%")
ABLATION_HEADER = ("Model", "AUC_CTR", "AUC_CTCVR", "GAUC_CTR", "GAUC_CTCVR")


def metrics_rows(report: MetricsReport):
    return [(m, report.metric(m)) for m in METRIC_NAMES]


def pcoc_table_rows(report: MetricsReport):
    return [(r.label, r.impressions, r.exposure_share, r.p_ctcvr, r.ctcvr, r.pcoc) for r in report.pcoc]


def comparison_rows(cmp: Comparison):
    return list(cmp.pcoc)


def ablation_rows(reports: Mapping[str, MetricsReport]):
    return [(name, *(rep.metric(m) for m in METRIC_NAMES)) for name, rep in reports.items()]


def item_mean_scores(records: Sequence[EvalRecord]) -> list[tuple[str, int, float]]:
    """Per item: impressions and mean predicted pCTCVR, sorted by item id."""
    acc: dict[str, list[float]] = defaultdict(lambda: [0, 0.0])
    for r in records:
        a = acc[r.item_id]
        a[0] += 1
        a[1] += r.p_ctcvr
    return [(i, int(n), s / n) for i, (n, s) in sorted(acc.items())]
