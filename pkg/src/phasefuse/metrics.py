"""Confusion matrix, per-class metrics and one-vs-rest ROC AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, ttest_rel

from .errors import ContractError

CLASS_NAMES = ("Normal", "Pneumonia", "COVID")


def confusion_matrix(true, pred, k: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(true, dtype=int)
    p = np.asarray(pred, dtype=int)
    if t.shape != p.shape:
        raise ContractError(f"true and pred lengths differ: {t.size} vs {p.size}")
    for name, a in (("true", t), ("pred", p)):
        if a.size and (a.min() < 0 or a.max() >= k):
            raise ContractError(f"{name} label outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class AucResult:
    per_class: np.ndarray  # NaN where undefined
    defined: np.ndarray  # bool per class
    macro: float


@dataclass
class MetricsReport:
    precision: np.ndarray
    sensitivity: np.ndarray
    f1: np.ndarray
    accuracy: np.ndarray  # one-vs-rest accuracy per class
    overall_accuracy: float
    zero_division: dict = field(default_factory=dict)  # metric -> bool array of flagged classes
    auc: np.ndarray | None = None
    auc_defined: np.ndarray | None = None

    def macro(self, name: str) -> float:
        if name == "auc":
            if self.auc is None or not self.auc_defined.any():
                return float("nan")
            return float(self.auc[self.auc_defined].mean())
        return float(getattr(self, name).mean())


def _safe_div(num, den):
    den = np.asarray(den, dtype=np.float64)
    flag = den == 0
    out = np.divide(num, np.where(flag, 1.0, den))
    out[flag] = 0.0
    return out, flag


def class_metrics(cm) -> MetricsReport:
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total <= 0:
        raise ContractError("confusion matrix must be square with a positive total")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision, f_p = _safe_div(tp, tp + fp)
    sensitivity, f_s = _safe_div(tp, tp + fn)
    # harmonic mean of precision and sensitivity, as one correctly rounded division
    f1, f_f = _safe_div(2 * tp, 2 * tp + fp + fn)
    acc = (tp + tn) / total
    flags = {"precision": f_p, "sensitivity": f_s, "f1": f_f}
    return MetricsReport(precision, sensitivity, f1, acc, float(np.trace(cm) / total), flags)


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC from average ranks; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_ovr(scores, true) -> AucResult:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(true, dtype=int)
    if s.ndim != 2 or s.shape[0] != t.size:
        raise ContractError(f"scores {s.shape} do not match {t.size} labels")
    if np.unique(t).size < 2:
        raise ContractError("AUC needs at least two distinct true classes")
    k = s.shape[1]
    per = np.array([binary_auc(s[:, c], t == c) for c in range(k)])
    defined = ~np.isnan(per)
    return AucResult(per, defined, float(per[defined].mean()))


def evaluate(scores, true, k: int | None = None) -> MetricsReport:
    """Full report from class scores (argmax prediction)."""
    s = np.asarray(scores, dtype=np.float64)
    k = k or s.shape[1]
    rep = class_metrics(confusion_matrix(true, s.argmax(axis=1), k))
    if np.unique(true).size >= 2:
        auc = roc_auc_ovr(s, true)
        rep.auc, rep.auc_defined = auc.per_class, auc.defined
    return rep


def report_rows(rep: MetricsReport, names=CLASS_NAMES) -> list[list]:
    """Table rows ``[metric, Avg, per-class...]`` for AUC, Precision, Sensitivity, F-1, Accuracy."""
    rows = [["Metric", "Avg"] + list(names)]
    auc = rep.auc if rep.auc is not None else np.full(len(names), np.nan)
    for label, vals, key in (("AUC", auc, "auc"), ("Precision", rep.precision, "precision"),
                             ("Sensitivity", rep.sensitivity, "sensitivity"), ("F-1", rep.f1, "f1"),
                             ("Accuracy", rep.accuracy, "accuracy")):
        rows.append([label, rep.macro(key)] + [float(v) for v in vals])
    return rows


def write_report(path, rep: MetricsReport, names=CLASS_NAMES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in report_rows(rep, names):
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def paired_t_test(a, b) -> tuple[float, float]:
    """Paired t statistic and two-sided p-value for per-fold scores."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ContractError("paired t-test needs two equal-length samples of size >= 2")
    res = ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)
