"""Multiclass evaluation: confusion matrix, precision/recall, one-vs-rest ROC.

Conventions: confusion rows are true classes, columns are predictions.
Accuracy, precision, and recall are reported as percentages in [0, 100];
per-class precision/recall are also available as raw fractions. AUC stays a
fraction in [0, 1]. A class with zero support (or zero predicted count)
gets 0.0 for the undefined ratio and is listed under ``undefined``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError


def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Count matrix of shape (C, C): entry [t, p] counts samples of true
    class t predicted as p."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if t.shape != p.shape or t.ndim != 1:
        raise ContractError(f"label arrays must be 1-D and equal length, got {t.shape} and {p.shape}")
    if t.size < 1:
        raise ContractError("need at least one sample")
    for name, arr in (("y_true", t), ("y_pred", p)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise DataError(f"{name} contains labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    """Percentage of samples on the confusion diagonal."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total < 1:
        raise ContractError("empty confusion matrix")
    return 100.0 * float(np.trace(cm)) / float(total)


@dataclasses.dataclass
class PrecisionRecall:
    """Per-class precision/recall as fractions plus the two usual averages.

    ``undefined_precision`` lists classes never predicted;
    ``undefined_recall`` lists classes with no true samples. Both score 0.
    """

    precision: np.ndarray
    recall: np.ndarray
    macro_precision: float
    macro_recall: float
    weighted_precision: float
    weighted_recall: float
    undefined_precision: list[int]
    undefined_recall: list[int]


def precision_recall(cm: np.ndarray) -> PrecisionRecall:
    cm = np.asarray(cm, dtype=np.float64)
    diag = np.diag(cm)
    pred_counts = cm.sum(axis=0)
    true_counts = cm.sum(axis=1)
    precision = np.where(pred_counts > 0, diag / np.maximum(pred_counts, 1), 0.0)
    recall = np.where(true_counts > 0, diag / np.maximum(true_counts, 1), 0.0)
    total = cm.sum()
    if total < 1:
        raise ContractError("empty confusion matrix")
    weights = true_counts / total
    return PrecisionRecall(
        precision=precision,
        recall=recall,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        weighted_precision=float((precision * weights).sum()),
        weighted_recall=float((recall * weights).sum()),
        undefined_precision=[int(i) for i in np.flatnonzero(pred_counts == 0)],
        undefined_recall=[int(i) for i in np.flatnonzero(true_counts == 0)],
    )


@dataclasses.dataclass
class RocCurve:
    """One-vs-rest ROC for a single class.

    Thresholds descend starting at +inf, so the curve begins at (0, 0) and
    ends at (1, 1). ``auc`` is the trapezoid area, a fraction in [0, 1].
    """

    label: int
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _roc_one_class(scores: np.ndarray, positive: np.ndarray) -> RocCurve:
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    p = int(pos.sum())
    n = pos.size - p
    # group ties: cumulative counts at each distinct score
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=np.int64)
    cut = np.concatenate([distinct, [s.size - 1]])
    tp = np.cumsum(pos)[cut]
    fp = (cut + 1) - tp
    thresholds = np.concatenate([[np.inf], s[cut]])
    tpr = np.concatenate([[0.0], tp / p])
    fpr = np.concatenate([[0.0], fp / n])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(label=-1, thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def roc_auc_ovr(scores: np.ndarray, y_true) -> tuple[list[Optional[RocCurve]], float]:
    """One-vs-rest ROC per class from an (n, C) score matrix.

    Classes where either side is empty get None. Returns the curve list and
    the macro AUC over the defined classes. Tied scores are grouped into one
    sweep point, which makes the trapezoid area match the rank statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    if scores.ndim != 2:
        raise ContractError(f"scores must be (n, C), got {scores.shape}")
    n, c = scores.shape
    if y.shape != (n,):
        raise ContractError(f"y_true shape {y.shape} does not match {n} score rows")
    if n < 2:
        raise ContractError("ROC needs at least two samples")
    if y.min() < 0 or y.max() >= c:
        raise DataError(f"y_true contains labels outside [0, {c})")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    curves: list[Optional[RocCurve]] = []
    defined = []
    for label in range(c):
        positive = y == label
        p = int(positive.sum())
        if p == 0 or p == n:
            curves.append(None)
            continue
        curve = _roc_one_class(scores[:, label], positive)
        curve.label = label
        curves.append(curve)
        defined.append(curve.auc)
    if not defined:
        raise DataError("no class has both positive and negative samples")
    return curves, float(np.mean(defined))


@dataclasses.dataclass
class MetricsReport:
    """Everything the evaluation stage reports for one model on one split."""

    class_names: list[str]
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    macro_precision: float
    macro_recall: float
    weighted_precision: float
    weighted_recall: float
    macro_auc: float
    curves: list[Optional[RocCurve]]
    num_samples: int


def report(model, ds) -> MetricsReport:
    """Score a model on a labeled dataset.

    ``model`` needs ``cfg`` and ``forward``; ``ds`` needs ``items`` and
    ``class_names``. Percentages for accuracy/precision/recall, fraction AUC.
    """
    if model.cfg.num_classes != len(ds.class_names):
        raise ConfigError(
            f"model predicts {model.cfg.num_classes} classes, dataset has {len(ds.class_names)}"
        )
    if len(ds.items) == 0:
        raise ContractError("cannot score an empty dataset")
    c = model.cfg.num_classes
    y_true = np.array([label for _, label in ds.items], dtype=np.int64)
    y_pred = np.empty(len(ds.items), dtype=np.int64)
    scores = np.empty((len(ds.items), c), dtype=np.float64)
    for i, (image, _) in enumerate(ds.items):
        probs = model.forward(image).probs.data
        scores[i] = probs
        y_pred[i] = int(np.argmax(probs))
    cm = confusion(y_true, y_pred, c)
    pr = precision_recall(cm)
    if len(ds.items) >= 2 and np.unique(y_true).size >= 2:
        curves, macro_auc = roc_auc_ovr(scores, y_true)
    else:
        curves, macro_auc = [None] * c, 0.0
    return MetricsReport(
        class_names=list(ds.class_names),
        confusion=cm,
        accuracy=accuracy(cm),
        precision=pr.precision * 100.0,
        recall=pr.recall * 100.0,
        macro_precision=pr.macro_precision * 100.0,
        macro_recall=pr.macro_recall * 100.0,
        weighted_precision=pr.weighted_precision * 100.0,
        weighted_recall=pr.weighted_recall * 100.0,
        macro_auc=macro_auc,
        curves=curves,
        num_samples=len(ds.items),
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Average reports from repeated runs (for example k folds): confusion
    cells and every summary metric are arithmetic means. Curves are dropped."""
    if not reports:
        raise ContractError("mean_report needs at least one report")
    names = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != names:
            raise ContractError("reports disagree on class names")
    k = len(reports)
    return MetricsReport(
        class_names=list(names),
        confusion=np.mean([r.confusion for r in reports], axis=0),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=np.mean([r.precision for r in reports], axis=0),
        recall=np.mean([r.recall for r in reports], axis=0),
        macro_precision=float(np.mean([r.macro_precision for r in reports])),
        macro_recall=float(np.mean([r.macro_recall for r in reports])),
        weighted_precision=float(np.mean([r.weighted_precision for r in reports])),
        weighted_recall=float(np.mean([r.weighted_recall for r in reports])),
        macro_auc=float(np.mean([r.macro_auc for r in reports])),
        curves=[None] * len(names),
        num_samples=int(sum(r.num_samples for r in reports)),
    )


# ---------------------------------------------------------------------------
# file emitters


def write_metrics_json(path: str, rep: MetricsReport) -> None:
    """Summary metrics as JSON with fixed key order; percentages rounded to
    two decimals, AUC to four."""
    payload = {
        "num_samples": rep.num_samples,
        "classes": rep.class_names,
        "accuracy": round(rep.accuracy, 2),
        "macro_precision": round(rep.macro_precision, 2),
        "macro_recall": round(rep.macro_recall, 2),
        "weighted_precision": round(rep.weighted_precision, 2),
        "weighted_recall": round(rep.weighted_recall, 2),
        "macro_auc": round(rep.macro_auc, 4),
        "per_class": [
            {
                "name": rep.class_names[i],
                "precision": round(float(rep.precision[i]), 2),
                "recall": round(float(rep.recall[i]), 2),
                "auc": round(rep.curves[i].auc, 4) if i < len(rep.curves) and rep.curves[i] else None,
            }
            for i in range(len(rep.class_names))
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_confusion_csv(path: str, rep: MetricsReport) -> None:
    """Header row of class names, then the C x C counts, true class per row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + rep.class_names)
        for i, name in enumerate(rep.class_names):
            row = rep.confusion[i]
            cells = [int(v) if float(v).is_integer() else repr(float(v)) for v in row]
            writer.writerow([name] + cells)


def write_roc_csv(path: str, rep: MetricsReport) -> None:
    """All defined curves in one file: class, threshold, fpr, tpr."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "threshold", "fpr", "tpr"])
        for curve in rep.curves:
            if curve is None:
                continue
            name = rep.class_names[curve.label]
            for t, f, s in zip(curve.thresholds, curve.fpr, curve.tpr):
                writer.writerow([name, repr(float(t)), repr(float(f)), repr(float(s))])
