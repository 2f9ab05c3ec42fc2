"""Binary classification metrics, fold aggregation and the metrics CSV format."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("auc", "accuracy", "sensitivity", "specificity")
CSV_COLUMNS = ("method", "fold") + METRIC_NAMES
SUMMARY_FOLD = "mean±std"
THRESHOLD = 0.5


class UndefinedAUCError(ValueError):
    pass


def auc_score(labels, scores) -> float:
    """Mann-Whitney AUC with half credit for ties; class 1 is positive."""
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one case of each class")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def threshold_metrics(labels, scores, threshold: float = THRESHOLD) -> dict:
    labels = np.asarray(labels).astype(int)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    pos, neg = labels == 1, labels == 0
    tp = int((pred & pos).sum())
    tn = int((~pred & neg).sum())
    return {
        "accuracy": (tp + tn) / len(labels),
        "sensitivity": tp / pos.sum() if pos.any() else float("nan"),
        "specificity": tn / neg.sum() if neg.any() else float("nan"),
    }


def binary_metrics(labels, scores) -> dict:
    """All four metrics; AUC is NaN when only one class is present."""
    out = threshold_metrics(labels, scores)
    try:
        out["auc"] = auc_score(labels, scores)
    except UndefinedAUCError:
        out["auc"] = float("nan")
    return {k: float(out[k]) for k in METRIC_NAMES}


@dataclass
class MetricsReport:
    method: str
    folds: list = field(default_factory=list)

    def add(self, fold_metrics: dict) -> None:
        self.folds.append({k: float(fold_metrics[k]) for k in METRIC_NAMES})

    def values(self, name: str) -> np.ndarray:
        return np.array([f[name] for f in self.folds], dtype=np.float64)

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def std(self, name: str) -> float:
        # population std over folds
        return float(np.std(self.values(name)))

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k)) for k in METRIC_NAMES}

    def format_row(self) -> str:
        return "  ".join(f"{k}={m:.3f}±{s:.3f}" for k, (m, s) in self.summary().items())


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        for i, f in enumerate(rep.folds):
            writer.writerow([rep.method, i] + [_fmt(f[k]) for k in METRIC_NAMES])
        writer.writerow([rep.method, SUMMARY_FOLD] + [f"{_fmt(m)}±{_fmt(s)}" for m, s in rep.summary().values()])
    return buf.getvalue()


def reports_from_csv(text: str) -> list:
    reports: dict = {}
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        if tuple(row) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics columns {list(row)}")
        rep = reports.setdefault(row["method"], MetricsReport(row["method"]))
        if row["fold"] == SUMMARY_FOLD:
            continue
        if int(row["fold"]) != len(rep.folds):
            raise ValueError(f"fold rows out of order for {row['method']}")
        rep.add({k: float(row[k]) for k in METRIC_NAMES})
    return list(reports.values())
