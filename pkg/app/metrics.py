import csv
import os

import numpy as np
from scipy.integrate import trapezoid

from app.dataset import batch_iterator
from app.models import CLASS_NAMES, ClassMetrics, ClassReport
from app.tools import write_json


class ConfusionMatrix:
    """K×K counts, rows are true classes and columns predicted ones."""

    def __init__(self, counts, class_names=CLASS_NAMES):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.class_names = tuple(class_names)

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(self.class_names)
            for row in self.counts:
                writer.writerow(int(v) for v in row)


def confusion_matrix(true_labels, predicted, k=len(CLASS_NAMES), class_names=None):
    true_labels = np.asarray(true_labels, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    if true_labels.shape != predicted.shape:
        raise ValueError(f"label sequences differ in length: {true_labels.shape} vs {predicted.shape}")
    for name, labels in (("true", true_labels), ("predicted", predicted)):
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"{name} label out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted), 1)
    if class_names is None:
        class_names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(i) for i in range(k))
    return ConfusionMatrix(counts, class_names)


def _ratio(num, den):
    return (float(num / den), False) if den else (0.0, True)


def precision_recall_f1(cm: ConfusionMatrix):
    """Per-class and macro metrics; zero denominators give 0 and are flagged."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    counts = cm.counts
    per_class = {}
    flagged = []
    for k, name in enumerate(cm.class_names):
        tp = counts[k, k]
        precision, p_zero = _ratio(tp, counts[:, k].sum())
        recall, r_zero = _ratio(tp, counts[k].sum())
        f1, f_zero = _ratio(2 * precision * recall, precision + recall)
        if p_zero:
            flagged.append(f"{name}.precision")
        if r_zero:
            flagged.append(f"{name}.recall")
        if f_zero:
            flagged.append(f"{name}.f1")
        per_class[name] = ClassMetrics(precision=precision, recall=recall, f1=f1,
                                       support=int(counts[k].sum()))

    macro = ClassMetrics(
        precision=float(np.mean([m.precision for m in per_class.values()])),
        recall=float(np.mean([m.recall for m in per_class.values()])),
        f1=float(np.mean([m.f1 for m in per_class.values()])),
        support=cm.total)
    return ClassReport(per_class=per_class, macro=macro, accuracy=cm.accuracy(), zero_division=flagged)


class RocCurve:
    def __init__(self, thresholds, fpr, tpr, auc, defined=True):
        self.thresholds = thresholds
        self.fpr = fpr
        self.tpr = tpr
        self.auc = auc
        self.defined = defined

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, x, y in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([f"{t:.6f}" if np.isfinite(t) else "inf", f"{x:.6f}", f"{y:.6f}"])


def roc_auc(scores, true_labels, k):
    """One-vs-rest ROC for class k; equal scores form a single threshold step."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(true_labels) == k
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = positive[order]

    # last index of each run of equal scores
    cuts = np.r_[np.nonzero(np.diff(sorted_scores))[0], scores.size - 1] if scores.size else np.array([], int)
    tps = np.cumsum(sorted_pos)[cuts] if scores.size else np.array([])
    fps = (cuts + 1) - tps

    thresholds = np.r_[np.inf, sorted_scores[cuts]] if scores.size else np.array([np.inf])
    tps = np.r_[0, tps]
    fps = np.r_[0, fps]

    defined = n_pos > 0 and n_neg > 0
    tpr = tps / n_pos if n_pos else np.zeros_like(tps, dtype=np.float64)
    fpr = fps / n_neg if n_neg else np.zeros_like(fps, dtype=np.float64)
    auc = float(trapezoid(tpr, fpr)) if defined else None
    return RocCurve(thresholds, fpr.astype(np.float64), tpr.astype(np.float64), auc, defined)


class EvaluationReport:
    def __init__(self, cm, report, curves, n_evaluated, n_skipped=0):
        self.cm = cm
        self.report = report
        self.curves = curves
        self.n_evaluated = n_evaluated
        self.n_skipped = n_skipped

    @property
    def accuracy(self):
        return self.report.accuracy

    def to_json(self):
        def rounded(m):
            return {
                "precision": round(m.precision, 4),
                "recall": round(m.recall, 4),
                "f1": round(m.f1, 4),
                "auc": None if m.auc is None else round(m.auc, 4),
            }

        return {
            "accuracy": round(self.report.accuracy, 4),
            "per_class": {name: rounded(m) for name, m in self.report.per_class.items()},
            "macro": rounded(self.report.macro),
            "zero_division": self.report.zero_division,
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
        }


def evaluate_predictions(probs, true_labels, n_skipped=0, class_names=CLASS_NAMES):
    probs = np.asarray(probs)
    true_labels = np.asarray(true_labels, dtype=int)
    k = probs.shape[1]
    cm = confusion_matrix(true_labels, np.argmax(probs, axis=1), k, class_names)
    report = precision_recall_f1(cm)

    curves = {}
    for i, name in enumerate(cm.class_names):
        curve = roc_auc(probs[:, i], true_labels, i)
        curves[name] = curve
        report.per_class[name].auc = curve.auc
    defined = [c.auc for c in curves.values() if c.defined]
    report.macro.auc = float(np.mean(defined)) if defined else None
    return EvaluationReport(cm, report, curves, int(len(true_labels)), n_skipped)


def metrics_report(model, manifest, split, store, batch_size=64, workers=0):
    """Single pass over a split; unreadable samples are excluded and counted."""
    source = batch_iterator(manifest, split, batch_size, store=store, workers=workers)
    probs, labels = [], []
    for images, onehot in source:
        probs.append(model.predict(images))
        labels.append(np.argmax(onehot, axis=1))
    if not probs:
        raise ValueError(f"split {split} produced no samples")
    return evaluate_predictions(np.concatenate(probs), np.concatenate(labels),
                                n_skipped=len(source.skipped))


def write_evaluation(report: EvaluationReport, outdir, extra=None):
    payload = report.to_json()
    if extra:
        payload.update(extra)
    write_json(os.path.join(outdir, "metrics.json"), payload)
    report.cm.to_csv(os.path.join(outdir, "confusion.csv"))
    for name, curve in report.curves.items():
        curve.to_csv(os.path.join(outdir, f"roc_{name}.csv"))
