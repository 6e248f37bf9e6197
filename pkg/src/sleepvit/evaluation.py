"""Confusion matrices, support-weighted scores, Cohen's kappa and report tables."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .signal_pipeline import APNEA_NAMES, STAGE_NAMES, Disorder

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name, *[int(v) for v in row]])
        return buf.getvalue()


def confusion_matrix(true_labels, predicted_labels, n_classes: int,
                     class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("label vectors differ in length")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts.reshape(n_classes, n_classes), names)


def _counts(cm) -> np.ndarray:
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.size == 0:
        raise ValueError("confusion matrix must be square and non-empty")
    if c.sum() <= 0:
        raise ValueError("empty confusion matrix")
    return c


def accuracy(cm) -> float:
    c = _counts(cm)
    return float(np.trace(c) / c.sum())


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    undefined: list[str]  # "precision:k" etc. where 0/0 was replaced by 0


def per_class_scores(cm) -> ClassScores:
    c = _counts(cm)
    tp = np.diag(c)
    pred = c.sum(axis=0)
    support = c.sum(axis=1)
    undefined = []

    def ratio(num, den, tag):
        out = np.zeros_like(num)
        for k in range(num.size):
            if den[k] == 0:
                undefined.append(f"{tag}:{k}")
            else:
                out[k] = num[k] / den[k]
        return out

    precision = ratio(tp, pred, "precision")
    recall = ratio(tp, support, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    return ClassScores(precision, recall, f1, support, undefined)


def precision_recall_f1(cm, averaging: str = "weighted"):
    """Averaged precision, recall and F1 plus the per-class F1 vector.

    ``weighted`` uses true-class support as weights; ``macro`` is the plain
    mean.  Both skip classes with zero support.
    """
    s = per_class_scores(cm)
    present = s.support > 0
    if averaging == "weighted":
        w = s.support / s.support.sum()
    elif averaging == "macro":
        w = present / present.sum()
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    return (float(w @ s.precision), float(w @ s.recall), float(w @ s.f1), s.f1.tolist())


def cohens_kappa(cm, with_flag: bool = False):
    """``(P0 - Pe) / (1 - Pe)``; returns 0 (flagged degenerate) when ``Pe == 1``."""
    c = _counts(cm)
    n = c.sum()
    p0 = np.trace(c) / n
    pe = float(c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    degenerate = bool(pe >= 1.0)
    k = 0.0 if degenerate else float((p0 - pe) / (1.0 - pe))
    return (k, degenerate) if with_flag else k


@dataclass
class MetricsReport:
    task: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_f1: list[float]
    kappa: float
    confusion: ConfusionMatrix
    kappa_degenerate: bool = False
    undefined: list[str] = field(default_factory=list)
    stratum: str | None = None

    @property
    def n(self) -> int:
        return self.confusion.total

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "stratum": self.stratum,
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class_f1": dict(zip(self.confusion.class_names, self.per_class_f1)),
            "kappa": self.kappa,
            "kappa_degenerate": self.kappa_degenerate,
            "undefined_ratios": self.undefined,
            "confusion_matrix": {
                "class_names": list(self.confusion.class_names),
                "counts": self.confusion.counts.tolist(),
            },
        }


def metrics_report(true_labels, predicted_labels, class_names: Sequence[str], task: str = "",
                   averaging: str = "weighted", stratum: str | None = None) -> MetricsReport:
    cm = confusion_matrix(true_labels, predicted_labels, len(class_names), class_names)
    p, r, f1, per = precision_recall_f1(cm, averaging)
    k, degenerate = cohens_kappa(cm, with_flag=True)
    return MetricsReport(task, accuracy(cm), p, r, f1, per, k, cm, degenerate,
                         per_class_scores(cm).undefined, stratum)


def stratified_report(predictions, labels, subject_disorders, class_names: Sequence[str],
                      task: str = "") -> dict[str, MetricsReport]:
    """One report per disorder group; empty groups are skipped with a warning."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    groups = []
    for d in subject_disorders:
        try:
            groups.append(Disorder(d).value)
        except ValueError:
            raise ValueError(f"unknown disorder label: {d!r}") from None
    groups = np.asarray(groups, dtype=object)
    if groups.shape != true.shape:
        raise ValueError("one disorder label per segment is required")
    out = {}
    for d in Disorder:
        mask = groups == d.value
        if not mask.any():
            log.warning("no segments for disorder %s; group omitted", d.value)
            continue
        out[d.value] = metrics_report(true[mask], pred[mask], class_names, task, stratum=d.value)
    return out


# ---------------------------------------------------------------------------
# output formats
# ---------------------------------------------------------------------------


def format_table(title: str, reports: Mapping[str, MetricsReport], digits: int = 2) -> str:
    """Aligned text table: one metric per row, one report per column."""
    cols = list(reports)

    def num(v):
        return f"{v:.{digits}f}"

    rows = [
        ("Accuracy", [num(reports[c].accuracy) for c in cols]),
        ("Precision", [num(reports[c].precision) for c in cols]),
        ("Recall", [num(reports[c].recall) for c in cols]),
        ("F1-score", [num(reports[c].f1) for c in cols]),
        ("F1-score per class",
         ["(" + ", ".join(num(v) for v in reports[c].per_class_f1) + ")" for c in cols]),
        ("Kappa", [num(reports[c].kappa) for c in cols]),
        ("Segments", [str(reports[c].n) for c in cols]),
    ]
    w0 = max(len("Metrics"), *(len(r[0]) for r in rows))
    widths = [max(len(c), *(len(r[1][i]) for r in rows)) for i, c in enumerate(cols)]
    lines = [title, "Metrics".ljust(w0) + " | " + " | ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("-" * len(lines[1]))
    for name, vals in rows:
        lines.append(name.ljust(w0) + " | " + " | ".join(v.ljust(w) for v, w in zip(vals, widths)))
    return "\n".join(lines) + "\n"


def reports_to_json(reports: Mapping[str, MetricsReport | Mapping]) -> str:
    def conv(v):
        if isinstance(v, MetricsReport):
            return v.to_dict()
        return {k: conv(x) for k, x in v.items()}

    return json.dumps(conv(reports), indent=2, sort_keys=True) + "\n"


def evaluate_predictions(stage_true, stage_pred, apnea_true, apnea_pred, disorders):
    """Overall and per-disorder reports for both tasks."""
    return {
        "stage": metrics_report(stage_true, stage_pred, STAGE_NAMES, "stage"),
        "apnea": metrics_report(apnea_true, apnea_pred, APNEA_NAMES, "apnea"),
        "stage_by_disorder": stratified_report(stage_pred, stage_true, disorders,
                                               STAGE_NAMES, "stage"),
        "apnea_by_disorder": stratified_report(apnea_pred, apnea_true, disorders,
                                               APNEA_NAMES, "apnea"),
    }
