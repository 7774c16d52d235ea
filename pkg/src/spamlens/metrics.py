"""
Confusion matrix and classification metrics.

Spam is the positive class: a false positive is a legitimate image classified
as spam, a false negative is spam classified as legitimate. Metrics are
computed as exact fractions; an undefined metric (zero denominator) raises
``UndefinedMetricError`` instead of silently reporting 0.

Functions:
    confusion: Count TP/TN/FP/FN from predictions and labels
    accuracy, recall, precision, f1: The four metrics
    metrics_report: JSON-ready dictionary of counts and metrics
    format_report: Human-readable confusion matrix and metric table
"""
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import pandas as pd
from sklearn.metrics import confusion_matrix

from spamlens.errors import UndefinedMetricError

POSITIVE = 1
NEGATIVE = 0
_LABEL_VALUES = {"spam": POSITIVE, "normal": NEGATIVE, 1: POSITIVE, 0: NEGATIVE, True: POSITIVE, False: NEGATIVE}


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts of a binary evaluation with spam as the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_frame(self) -> pd.DataFrame:
        """2x2 table: rows are the true label, columns the predicted label."""
        return pd.DataFrame(
            [[self.tn, self.fp], [self.fn, self.tp]],
            index=pd.Index(["normal", "spam"], name="true label"),
            columns=pd.Index(["normal", "spam"], name="predicted label"),
        )


def _as_label(value) -> int:
    try:
        return _LABEL_VALUES[value]
    except (KeyError, TypeError):
        raise ValueError(f"Unknown label {value!r}; expected 'spam'/'normal' or 1/0") from None


def confusion(predictions: Sequence, labels: Sequence) -> ConfusionMatrix:
    """Count a confusion matrix.

    Args:
        predictions (sequence): Predicted labels, ``"spam"``/``"normal"`` or 1/0.
        labels (sequence): True labels in the same encoding.

    Returns:
        ConfusionMatrix: Counts with spam as the positive class.

    Raises:
        ValueError: If the sequences are empty, differ in length or contain
            unknown labels.

    Examples:
        >>> confusion(["spam", "normal"], ["spam", "spam"])
        ConfusionMatrix(tp=1, tn=0, fp=0, fn=1)
    """
    if len(predictions) != len(labels):
        raise ValueError(
            f"predictions and labels differ in length: {len(predictions)} vs {len(labels)}"
        )
    if len(labels) == 0:
        raise ValueError("Cannot build a confusion matrix from zero samples")
    y_pred = [_as_label(p) for p in predictions]
    y_true = [_as_label(t) for t in labels]
    tn, fp, fn, tp = confusion_matrix(y_true, y_pred, labels=[NEGATIVE, POSITIVE]).ravel()
    return ConfusionMatrix(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn))


def accuracy(cm: ConfusionMatrix) -> Fraction:
    """(TP + TN) / (TP + TN + FP + FN)"""
    if cm.total == 0:
        raise UndefinedMetricError("accuracy", "accuracy is undefined for an empty confusion matrix")
    return Fraction(cm.tp + cm.tn, cm.total)


def recall(cm: ConfusionMatrix) -> Fraction:
    """TP / (TP + FN)"""
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("recall", "recall is undefined: no spam samples (tp + fn = 0)")
    return Fraction(cm.tp, cm.tp + cm.fn)


def precision(cm: ConfusionMatrix) -> Fraction:
    """TP / (TP + FP)"""
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision", "precision is undefined: nothing predicted as spam (tp + fp = 0)")
    return Fraction(cm.tp, cm.tp + cm.fp)


def f1(cm: ConfusionMatrix) -> Fraction:
    """Harmonic mean of precision and recall."""
    try:
        p = precision(cm)
        r = recall(cm)
    except UndefinedMetricError as e:
        raise UndefinedMetricError("f1", f"f1 is undefined: {e}") from e
    if p + r == 0:
        raise UndefinedMetricError("f1", "f1 is undefined: precision + recall = 0")
    return 2 * p * r / (p + r)


METRICS = (("accuracy", accuracy), ("recall", recall), ("precision", precision), ("f1", f1))


def metrics_report(cm: ConfusionMatrix) -> dict:
    """Counts and metrics as a JSON-ready dict; undefined metrics are None."""
    report = {"tp": cm.tp, "tn": cm.tn, "fp": cm.fp, "fn": cm.fn}
    for name, metric in METRICS:
        try:
            report[name] = float(metric(cm))
        except UndefinedMetricError:
            report[name] = None
    return report


def format_percent(value) -> str:
    if value is None:
        return "undefined"
    return f"{float(value) * 100:.2f}%"


def format_report(cm: ConfusionMatrix) -> str:
    """Confusion matrix followed by the four metrics as percentages."""
    report = metrics_report(cm)
    table = pd.DataFrame(
        {"value": [format_percent(report[name]) for name, _ in METRICS]},
        index=[name for name, _ in METRICS],
    )
    return (
        "Confusion matrix\n"
        + cm.to_frame().to_string()
        + "\n\nMetrics\n"
        + table.to_string(header=False)
    )
