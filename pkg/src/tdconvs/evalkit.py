"""Confusion matrices, per-class precision/recall/F1, overall accuracy,
mean F1, and CSV/JSON report emission.

Zero-denominator metrics are defined as 0 (not NaN), so mF1 stays total
and never-predicted classes are penalized; mF1 averages over all
configured classes, present in the ground truth or not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, MetricError

FLOAT_DECIMALS = 6
CSV_HEADER = "class,precision,recall,f1,count"

# Published full-scale benchmark scores for this architecture, kept for
# documentation only. Desk-scale runs do not reproduce them: the source
# datasets are licensed and the published training is 500 epochs on a GPU.
PUBLISHED_BENCHMARKS = {
    "isprs_vaihingen": {"oa": 0.845, "mf1": 0.734},
    "lasdu": {"oa": 0.8761, "mf1": 0.7785},
}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C], rows = ground truth, cols = prediction

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    class_names: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    counts: np.ndarray      # ground-truth points per class
    oa: float
    mf1: float


def confusion(gt: np.ndarray, pred: np.ndarray, n_classes: int) -> ConfusionMatrix:
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape:
        raise DataError(f"gt/pred length mismatch: {gt.shape} vs {pred.shape}")
    for name, arr in (("gt", gt), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} label out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (gt, pred), 1)
    return ConfusionMatrix(counts)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    return ConfusionMatrix(a.counts + b.counts)


def precision_recall(cm: ConfusionMatrix, c: int) -> tuple[float, float]:
    tp = cm.counts[c, c]
    fp = cm.counts[:, c].sum() - tp
    fn = cm.counts[c, :].sum() - tp
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return float(precision), float(recall)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricError("overall accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def f1_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    f1 = np.zeros(cm.n_classes)
    for c in range(cm.n_classes):
        p, r = precision_recall(cm, c)
        f1[c] = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return f1, float(f1.mean())


def build_report(cm: ConfusionMatrix,
                 class_names: list[str] | None = None) -> MetricsReport:
    n = cm.n_classes
    names = list(class_names) if class_names else [str(c) for c in range(n)]
    precision = np.zeros(n)
    recall = np.zeros(n)
    for c in range(n):
        precision[c], recall[c] = precision_recall(cm, c)
    f1, mf1 = f1_scores(cm)
    return MetricsReport(names, precision, recall, f1,
                         cm.counts.sum(axis=1), overall_accuracy(cm), mf1)


def emit_report(report: MetricsReport, path, format: str = "csv") -> None:
    """Write the report with stable field order and 6-decimal floats."""
    if format == "csv":
        lines = [CSV_HEADER]
        for c, name in enumerate(report.class_names):
            lines.append(
                f"{name},{report.precision[c]:.6f},{report.recall[c]:.6f},"
                f"{report.f1[c]:.6f},{int(report.counts[c])}")
        text = "\n".join(lines) + "\n"
    elif format == "json":
        payload = {
            "classes": [
                {"class": name,
                 "precision": round(float(report.precision[c]), FLOAT_DECIMALS),
                 "recall": round(float(report.recall[c]), FLOAT_DECIMALS),
                 "f1": round(float(report.f1[c]), FLOAT_DECIMALS),
                 "count": int(report.counts[c])}
                for c, name in enumerate(report.class_names)],
            "oa": round(report.oa, FLOAT_DECIMALS),
            "mf1": round(report.mf1, FLOAT_DECIMALS),
        }
        text = json.dumps(payload, indent=2) + "\n"
    else:
        raise DataError(f"unknown report format '{format}'")
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from exc


def read_report(path, format: str = "csv") -> MetricsReport:
    """Round-trip reader. The CSV carries only per-class rows; OA and mF1
    are recovered from them (OA = sum recall*count / sum count)."""
    if format == "csv":
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != CSV_HEADER:
            raise DataError(f"{path}: missing report header")
        names, precision, recall, f1, counts = [], [], [], [], []
        for ln in lines[1:]:
            name, p, r, f, n = ln.split(",")
            names.append(name)
            precision.append(float(p))
            recall.append(float(r))
            f1.append(float(f))
            counts.append(int(n))
        precision = np.asarray(precision)
        recall = np.asarray(recall)
        f1 = np.asarray(f1)
        counts = np.asarray(counts)
        total = counts.sum()
        oa = float((recall * counts).sum() / total) if total else 0.0
        return MetricsReport(names, precision, recall, f1, counts,
                             oa, float(f1.mean()))
    if format == "json":
        with open(path) as fh:
            payload = json.load(fh)
        rows = payload["classes"]
        return MetricsReport(
            [r["class"] for r in rows],
            np.asarray([r["precision"] for r in rows]),
            np.asarray([r["recall"] for r in rows]),
            np.asarray([r["f1"] for r in rows]),
            np.asarray([r["count"] for r in rows]),
            float(payload["oa"]), float(payload["mf1"]))
    raise DataError(f"unknown report format '{format}'")
